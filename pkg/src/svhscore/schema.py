"""Joint taxonomy, score ranges and SvH aggregation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import MalformedManifest, ScoreOutOfRange

if TYPE_CHECKING:
    from .records import PatientRecord

N_JOINT_TYPES = 21
N_FOOT_JOINTS = 6
HAND_NARROWING_COUNT = 15
HAND_EROSION_COUNT = 16


class Task(str, enum.Enum):
    NARROWING = "narrowing"
    EROSION = "erosion"


class Limb(str, enum.Enum):
    HAND = "hand"
    FOOT = "foot"


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"

    def flipped(self) -> "Side":
        return Side.RIGHT if self is Side.LEFT else Side.LEFT


@dataclass(frozen=True)
class JointType:
    id: int
    name: str
    has_narrowing: bool
    has_erosion: bool

    def scores(self, task: Task) -> bool:
        return self.has_narrowing if task is Task.NARROWING else self.has_erosion


@dataclass(frozen=True)
class ScoreRange:
    task: Task
    limb: Limb
    min: int
    max: int

    def contains(self, value: float) -> bool:
        return self.min <= value <= self.max


_MAX_SCORE = {
    (Task.NARROWING, Limb.HAND): 4,
    (Task.NARROWING, Limb.FOOT): 4,
    (Task.EROSION, Limb.HAND): 5,
    (Task.EROSION, Limb.FOOT): 10,
}

# classes per damage head; foot erosion is trained at half scale
N_NARROWING_CLASSES = 5
N_EROSION_CLASSES = 6


@dataclass(frozen=True)
class JointSchema:
    types: tuple[JointType, ...]
    foot_map: tuple[int, ...]
    background_class: int = N_JOINT_TYPES

    @property
    def n_seg_classes(self) -> int:
        return len(self.types) + 1

    def type(self, type_id: int) -> JointType:
        return self.types[type_id]

    def joint_ids(self, limb: Limb) -> tuple[int, ...]:
        if limb is Limb.FOOT:
            return self.foot_map
        return tuple(t.id for t in self.types)

    def is_valid_joint(self, type_id: int, limb: Limb) -> bool:
        return type_id in self.joint_ids(limb)

    def scored(self, type_id: int, task: Task, limb: Limb) -> bool:
        """Whether ``task`` is graded for joint ``type_id`` on ``limb``."""
        if not self.is_valid_joint(type_id, limb):
            return False
        return self.types[type_id].scores(task)


def score_range(schema: JointSchema | None, task: Task, limb: Limb) -> ScoreRange:
    return ScoreRange(task=Task(task), limb=Limb(limb), min=0, max=_MAX_SCORE[Task(task), Limb(limb)])


def default_manifest() -> dict:
    types = []
    for i in range(N_JOINT_TYPES):
        both = i < 10
        narrowing = both or 10 <= i < 15
        erosion = both or i >= 15
        types.append({"id": i, "name": f"J{i + 1:02d}", "narrowing": narrowing, "erosion": erosion})
    return {"types": types, "foot_map": list(range(N_FOOT_JOINTS))}


def schema_from_dict(data: dict) -> JointSchema:
    try:
        raw_types = data["types"]
        foot_map = tuple(int(i) for i in data["foot_map"])
        types = tuple(
            JointType(int(t["id"]), str(t["name"]), bool(t["narrowing"]), bool(t["erosion"]))
            for t in raw_types
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"manifest is missing fields: {exc}") from exc

    if len(types) != N_JOINT_TYPES:
        raise MalformedManifest(f"expected {N_JOINT_TYPES} joint types, got {len(types)}")
    ids = sorted(t.id for t in types)
    if ids != list(range(N_JOINT_TYPES)):
        raise MalformedManifest(f"joint ids must be a permutation of 0..{N_JOINT_TYPES - 1}")
    types = tuple(sorted(types, key=lambda t: t.id))
    n_narrow = sum(t.has_narrowing for t in types)
    n_erosion = sum(t.has_erosion for t in types)
    if n_narrow != HAND_NARROWING_COUNT or n_erosion != HAND_EROSION_COUNT:
        raise MalformedManifest(
            f"need {HAND_NARROWING_COUNT} narrowing and {HAND_EROSION_COUNT} erosion types, "
            f"got {n_narrow} and {n_erosion}"
        )
    if any(not (t.has_narrowing or t.has_erosion) for t in types):
        raise MalformedManifest("every joint type must be scored by at least one task")
    if len(foot_map) != N_FOOT_JOINTS or len(set(foot_map)) != N_FOOT_JOINTS:
        raise MalformedManifest(f"foot_map must list {N_FOOT_JOINTS} distinct ids")
    for i in foot_map:
        if not 0 <= i < N_JOINT_TYPES:
            raise MalformedManifest(f"foot_map id {i} out of range")
        if not (types[i].has_narrowing and types[i].has_erosion):
            raise MalformedManifest(f"foot_map id {i} ({types[i].name}) is not scored on both tasks")
    return JointSchema(types=types, foot_map=foot_map)


def load_manifest(path: str | Path | None = None) -> JointSchema:
    """Load a joint manifest; ``None`` gives the built-in default."""
    if path is None:
        return schema_from_dict(default_manifest())
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc
    return schema_from_dict(data)


DEFAULT_SCHEMA = load_manifest()


def total_svh(patient: "PatientRecord", schema: JointSchema = DEFAULT_SCHEMA) -> int:
    """Sum of every narrowing and erosion score over the patient's four images."""
    total = 0
    for image in patient.images.values():
        for joint in image.joints:
            for task, value in ((Task.NARROWING, joint.narrowing), (Task.EROSION, joint.erosion)):
                if value is None or not schema.scored(joint.type_id, task, image.limb):
                    continue
                rng = score_range(schema, task, image.limb)
                if not rng.contains(value):
                    raise ScoreOutOfRange(
                        f"{patient.patient_id}: joint {joint.type_id} {task.value}={value} "
                        f"outside [{rng.min}, {rng.max}]"
                    )
                total += int(value)
    return total


def max_total_svh(schema: JointSchema = DEFAULT_SCHEMA) -> int:
    total = 0
    for limb in (Limb.HAND, Limb.FOOT):
        for type_id in schema.joint_ids(limb):
            for task in Task:
                if schema.scored(type_id, task, limb):
                    total += 2 * _MAX_SCORE[task, limb]
    return total
