"""Annotated images, patient records and their on-disk format (PNG + JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoFailure, ScoreOutOfRange, ValidationError
from .schema import DEFAULT_SCHEMA, JointSchema, Limb, Side, Task, score_range

IMAGE_KEYS = ("LH", "RH", "LF", "RF")
KEY_LIMB_SIDE = {
    "LH": (Limb.HAND, Side.LEFT),
    "RH": (Limb.HAND, Side.RIGHT),
    "LF": (Limb.FOOT, Side.LEFT),
    "RF": (Limb.FOOT, Side.RIGHT),
}


def image_key(limb: Limb, side: Side) -> str:
    for key, value in KEY_LIMB_SIDE.items():
        if value == (limb, side):
            return key
    raise KeyError((limb, side))


@dataclass(frozen=True)
class Joint:
    type_id: int
    x: float
    y: float
    narrowing: int | None = None
    erosion: int | None = None

    def score(self, task: Task) -> int | None:
        return self.narrowing if task is Task.NARROWING else self.erosion


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    limb: Limb
    side: Side
    joints: list[Joint] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def key(self) -> str:
        return image_key(self.limb, self.side)

    def with_(self, **changes) -> "AnnotatedImage":
        return replace(self, **changes)

    def centers(self) -> list[tuple[int, float, float]]:
        return [(j.type_id, j.x, j.y) for j in self.joints]

    def validate(self, schema: JointSchema = DEFAULT_SCHEMA) -> None:
        h, w = self.pixels.shape
        for j in self.joints:
            if not schema.is_valid_joint(j.type_id, self.limb):
                raise ValidationError(f"joint type {j.type_id} not valid on {self.limb.value}")
            if not (0 <= j.x <= w - 1 and 0 <= j.y <= h - 1):
                raise ValidationError(f"joint {j.type_id} center ({j.x}, {j.y}) outside {w}x{h} image")
            for task in Task:
                value = j.score(task)
                if value is None:
                    continue
                rng = score_range(schema, task, self.limb)
                if not rng.contains(value):
                    raise ScoreOutOfRange(f"joint {j.type_id} {task.value}={value} outside [0, {rng.max}]")


@dataclass
class PatientRecord:
    patient_id: str
    images: dict[str, AnnotatedImage]

    def __post_init__(self):
        missing = set(IMAGE_KEYS) - set(self.images)
        if missing:
            raise ValidationError(f"patient {self.patient_id} lacks images {sorted(missing)}")


def read_png(path: str | Path) -> np.ndarray:
    """Grayscale PNG normalized to [0, 1]; 8- and 16-bit inputs are accepted."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if mode != "LA" else arr[..., 0]
        return np.asarray(arr, dtype=np.float64) / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    """Write a [0, 1] image as a 16-bit grayscale PNG."""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    try:
        Image.fromarray(data).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def joint_to_json(j: Joint) -> dict:
    return {"type": j.type_id, "x": j.x, "y": j.y, "narrowing": j.narrowing, "erosion": j.erosion}


def joint_from_json(d: dict) -> Joint:
    return Joint(
        type_id=int(d["type"]),
        x=float(d["x"]),
        y=float(d["y"]),
        narrowing=None if d.get("narrowing") is None else int(d["narrowing"]),
        erosion=None if d.get("erosion") is None else int(d["erosion"]),
    )


def save_patient(record: PatientRecord, directory: str | Path) -> Path:
    """Write the four PNGs and the annotation JSON; returns the JSON path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = {}
    for key in IMAGE_KEYS:
        img = record.images[key]
        fname = f"{record.patient_id}_{key}.png"
        write_png(directory / fname, img.pixels)
        images[key] = {"file": fname, "joints": [joint_to_json(j) for j in img.joints]}
    path = directory / f"{record.patient_id}.json"
    payload = {"patient_id": record.patient_id, "images": images}
    try:
        path.write_text(json.dumps(payload, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_patient(path: str | Path, schema: JointSchema = DEFAULT_SCHEMA) -> PatientRecord:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    images = {}
    try:
        entries = payload["images"].items()
        patient_id = str(payload["patient_id"])
        for key, entry in entries:
            if key not in KEY_LIMB_SIDE:
                raise ValidationError(f"{path}: unknown image key {key!r}")
            limb, side = KEY_LIMB_SIDE[key]
            pixels = read_png(path.parent / entry["file"])
            img = AnnotatedImage(pixels, limb, side, [joint_from_json(j) for j in entry["joints"]])
            img.validate(schema)
            images[key] = img
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: malformed annotation ({exc!r})") from exc
    return PatientRecord(patient_id, images)


def load_dataset(directory: str | Path, schema: JointSchema = DEFAULT_SCHEMA) -> list[PatientRecord]:
    """All patients in a directory, sorted by patient id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"{directory} is not a directory")
    records = [load_patient(p, schema) for p in sorted(directory.glob("*.json"))]
    return sorted(records, key=lambda r: r.patient_id)
