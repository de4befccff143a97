"""Synthetic limb "radiographs" whose local appearance encodes the damage grades.

Each joint is drawn as two bright bars facing each other across a gap.
Narrowing shrinks the gap, erosion bites a semicircular notch out of the
lower bar's facing end. A faint horizontal intensity ramp marks the side
(brighter towards the thumb / big toe) so mirrored layouts stay
distinguishable after horizontal flips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryOverflow, IoFailure
from .records import IMAGE_KEYS, KEY_LIMB_SIDE, AnnotatedImage, Joint, PatientRecord, save_patient
from .schema import DEFAULT_SCHEMA, JointSchema, Limb, Side, Task, score_range

BAR_INTENSITY = 0.9
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_patients: int = 64
    canvas: tuple[int, int] = (64, 64)
    joints_per_hand: int = 21
    joints_per_foot: int = 6
    bar_width: float = 5.0
    bar_height: float = 4.0
    gap_base: float = 2.0
    gap_per_grade: float = 1.5
    notch_per_grade: float = 0.8
    noise_sigma: float = 0.05
    score_zero_prob: float = 0.5
    geometric_ratio: float = 0.6
    jitter_px: float = 2.0
    max_tilt_deg: float = 10.0
    side_ramp: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))


@dataclass(frozen=True)
class JointGlyph:
    """Geometry of one rendered joint in canvas coordinates."""

    type_id: int
    cx: float
    cy: float
    tilt_deg: float
    gap: float
    notch_radius: float
    bar_width: float
    bar_height: float

    def corners(self) -> np.ndarray:
        hw = self.bar_width / 2
        hv = self.gap / 2 + self.bar_height
        local = np.array([[-hw, -hv], [hw, -hv], [hw, hv], [-hw, hv]])
        t = math.radians(self.tilt_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return local @ rot.T + [self.cx, self.cy]

    def coverage(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Indicator of bar material at canvas points."""
        t = math.radians(self.tilt_deg)
        dx, dy = xs - self.cx, ys - self.cy
        u = math.cos(t) * dx + math.sin(t) * dy
        v = -math.sin(t) * dx + math.cos(t) * dy
        half_gap = self.gap / 2
        in_u = np.abs(u) <= self.bar_width / 2
        top = in_u & (v >= -half_gap - self.bar_height) & (v <= -half_gap)
        bottom = in_u & (v >= half_gap) & (v <= half_gap + self.bar_height)
        if self.notch_radius > 0:
            bottom &= u * u + (v - half_gap) ** 2 > self.notch_radius**2
        return top | bottom


def narrowing_gap(narrowing: int, cfg: SynthConfig) -> float:
    return cfg.gap_base + (4 - narrowing) * cfg.gap_per_grade


def notch_radius(erosion: int, limb: Limb, cfg: SynthConfig) -> float:
    normalized = erosion / score_range(None, Task.EROSION, limb).max
    return cfg.notch_per_grade * normalized * 5


def grid_slots(limb: Limb, canvas: tuple[int, int], cfg: SynthConfig) -> list[tuple[float, float]]:
    """Right-side joint slots in reading order; left-side layouts are mirrored."""
    h, w = canvas
    if limb is Limb.HAND:
        rows, cols, n = 3, 7, cfg.joints_per_hand
    else:
        rows, cols, n = 2, 3, cfg.joints_per_foot
    mx, my = 0.1 * (w - 1), 0.19 * (h - 1)
    xs = np.linspace(mx, w - 1 - mx, cols) if cols > 1 else [(w - 1) / 2]
    ys = np.linspace(my, h - 1 - my, rows) if rows > 1 else [(h - 1) / 2]
    slots = [(float(x), float(y)) for y in ys for x in xs]
    return slots[:n]


def sample_scores(rng: np.random.Generator, task: Task, limb: Limb, cfg: SynthConfig = SynthConfig()) -> int:
    """Zero-inflated grade: 0 with ``score_zero_prob``, else truncated geometric over 1..max."""
    top = score_range(None, task, limb).max
    if rng.random() < cfg.score_zero_prob:
        return 0
    weights = cfg.geometric_ratio ** np.arange(top)
    cdf = np.cumsum(weights / weights.sum())
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), top - 1) + 1)


def render_image(
    rng: np.random.Generator,
    limb: Limb,
    side: Side,
    scores: dict[int, tuple[int | None, int | None]],
    cfg: SynthConfig = SynthConfig(),
    schema: JointSchema = DEFAULT_SCHEMA,
) -> AnnotatedImage:
    """Render one limb image; ``scores`` maps joint type id to (narrowing, erosion)."""
    h, w = cfg.canvas
    ids = schema.joint_ids(limb)
    slots = grid_slots(limb, cfg.canvas, cfg)
    glyphs, joints = [], []
    for type_id, (sx, sy) in zip(ids, slots):
        narrowing, erosion = scores[type_id]
        if side is Side.LEFT:
            sx = w - 1 - sx
        cx = sx + rng.uniform(-cfg.jitter_px, cfg.jitter_px)
        cy = sy + rng.uniform(-cfg.jitter_px, cfg.jitter_px)
        tilt = rng.uniform(-cfg.max_tilt_deg, cfg.max_tilt_deg)
        glyph = JointGlyph(
            type_id,
            cx,
            cy,
            tilt,
            narrowing_gap(narrowing or 0, cfg),
            notch_radius(erosion or 0, limb, cfg),
            cfg.bar_width,
            cfg.bar_height,
        )
        corners = glyph.corners()
        if corners.min() < 0 or corners[:, 0].max() > w - 1 or corners[:, 1].max() > h - 1:
            raise GeometryOverflow(f"joint {type_id} footprint leaves the {w}x{h} canvas")
        glyphs.append(glyph)
        joints.append(Joint(type_id, float(cx), float(cy), narrowing, erosion))

    ramp = np.linspace(cfg.side_ramp, 0.0, w) if side is Side.RIGHT else np.linspace(0.0, cfg.side_ramp, w)
    pixels = np.tile(ramp, (h, 1))
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    for g in glyphs:
        corners = g.corners()
        x0, y0 = np.floor(corners.min(axis=0)).astype(int)
        x1, y1 = np.ceil(corners.max(axis=0)).astype(int)
        px = np.arange(x0, x1 + 1)
        py = np.arange(y0, y1 + 1)
        sub_x = (px[:, None] + offsets[None, :]).ravel()
        sub_y = (py[:, None] + offsets[None, :]).ravel()
        gx, gy = np.meshgrid(sub_x, sub_y)
        cov = g.coverage(gx, gy).reshape(len(py), SUPERSAMPLE, len(px), SUPERSAMPLE).mean(axis=(1, 3))
        patch = pixels[y0 : y1 + 1, x0 : x1 + 1]
        pixels[y0 : y1 + 1, x0 : x1 + 1] = np.maximum(patch, BAR_INTENSITY * cov)
    if cfg.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, cfg.noise_sigma, size=pixels.shape)
    return AnnotatedImage(np.clip(pixels, 0.0, 1.0), limb, side, joints)


def glyph_for(image: AnnotatedImage, joint: Joint, cfg: SynthConfig, tilt_deg: float = 0.0) -> JointGlyph:
    return JointGlyph(
        joint.type_id,
        joint.x,
        joint.y,
        tilt_deg,
        narrowing_gap(joint.narrowing or 0, cfg),
        notch_radius(joint.erosion or 0, image.limb, cfg),
        cfg.bar_width,
        cfg.bar_height,
    )


def sample_patient_scores(rng: np.random.Generator, limb: Limb, cfg: SynthConfig, schema: JointSchema = DEFAULT_SCHEMA):
    scores = {}
    for type_id in schema.joint_ids(limb):
        n = sample_scores(rng, Task.NARROWING, limb, cfg) if schema.scored(type_id, Task.NARROWING, limb) else None
        e = sample_scores(rng, Task.EROSION, limb, cfg) if schema.scored(type_id, Task.EROSION, limb) else None
        scores[type_id] = (n, e)
    return scores


def patient_ids(n: int) -> list[str]:
    width = max(2, len(str(max(n - 1, 0))))
    return [f"P{i:0{width}d}" for i in range(n)]


def make_patient(index: int, patient_id: str, cfg: SynthConfig, schema: JointSchema = DEFAULT_SCHEMA) -> PatientRecord:
    rng = np.random.default_rng([cfg.seed, index])
    images = {}
    for key in IMAGE_KEYS:
        limb, side = KEY_LIMB_SIDE[key]
        scores = sample_patient_scores(rng, limb, cfg, schema)
        images[key] = render_image(rng, limb, side, scores, cfg, schema)
    return PatientRecord(patient_id, images)


def make_dataset(cfg: SynthConfig, schema: JointSchema = DEFAULT_SCHEMA) -> list[PatientRecord]:
    return [make_patient(i, pid, cfg, schema) for i, pid in enumerate(patient_ids(cfg.n_patients))]


def generate_dataset(cfg: SynthConfig, out_dir, schema: JointSchema = DEFAULT_SCHEMA) -> list[Path]:
    """Write ``n_patients`` records (four PNGs + one JSON each); returns the JSON paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    return [save_patient(rec, out) for rec in make_dataset(cfg, schema)]
