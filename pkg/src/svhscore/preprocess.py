"""Edge-based bounding box, crop/resize and center-consistent augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CenterLost, CenterOutsideBox, NoContent, ValidationError
from .records import AnnotatedImage, Joint

FULL_SCALE_SIZE = (864, 928)
DESK_SIZE = (64, 64)

# Sobel response of a unit step, on both axes at once
SOBEL_MAX_MAGNITUDE = 4.0 * math.sqrt(2.0)
MIN_EDGE_PIXELS = 50


@dataclass(frozen=True)
class BBox:
    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    @classmethod
    def full(cls, h: int, w: int) -> "BBox":
        return cls(0, 0, h - 1, w - 1)


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    rng_seed: int = 0

    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.scale == 1.0 and not self.hflip

    def inverse(self) -> "AugmentSpec":
        """Spec whose transform undoes this one.

        Mirroring reverses the sense of rotation, so a flipped spec keeps
        its angle while an unflipped one negates it.
        """
        angle = self.rotation_deg if self.hflip else -self.rotation_deg
        return AugmentSpec(angle, 1.0 / self.scale, self.hflip, self.rng_seed)


@dataclass(frozen=True)
class AugmentRanges:
    max_rotation_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    hflip_prob: float = 0.5


def draw_augment_spec(seed: int, ranges: AugmentRanges = AugmentRanges()) -> AugmentSpec:
    rng = np.random.default_rng(seed)
    rotation = float(rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg))
    scale = float(rng.uniform(ranges.scale_min, ranges.scale_max))
    hflip = bool(rng.random() < ranges.hflip_prob)
    return AugmentSpec(rotation, scale, hflip, int(seed))


def gradient_magnitude(pixels: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with edge-replicated borders."""
    p = np.pad(np.asarray(pixels, dtype=np.float64), 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def edge_mask(pixels: np.ndarray, low_frac: float = 0.04, high_frac: float = 0.10) -> np.ndarray:
    mag = gradient_magnitude(pixels)
    strong = mag > high_frac * SOBEL_MAX_MAGNITUDE
    weak = mag > low_frac * SOBEL_MAX_MAGNITUDE
    return _kernels.hysteresis(strong, weak)


def detect_bbox(
    pixels: np.ndarray,
    low_frac: float = 0.04,
    high_frac: float = 0.10,
    margin_frac: float = 0.03,
) -> BBox:
    """Bounding box of the limb from hysteresis-thresholded gradient edges.

    Thresholds are fractions of the largest Sobel magnitude a [0, 1] image
    can produce, so faint noise never qualifies. The tight box is grown by
    ``margin_frac`` of its own size on each side and clipped to the image.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or min(pixels.shape) < 8:
        raise ValidationError(f"image must be at least 8x8, got {pixels.shape}")
    edges = edge_mask(pixels, low_frac, high_frac)
    if edges.sum() < MIN_EDGE_PIXELS:
        raise NoContent(f"only {int(edges.sum())} edge pixels (need {MIN_EDGE_PIXELS})")
    rows = np.flatnonzero(edges.any(axis=1))
    cols = np.flatnonzero(edges.any(axis=0))
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    mr = int(round(margin_frac * (r1 - r0 + 1)))
    mc = int(round(margin_frac * (c1 - c0 + 1)))
    h, w = pixels.shape
    return BBox(max(0, r0 - mr), max(0, c0 - mc), min(h - 1, r1 + mr), min(w - 1, c1 + mc))


def crop_resize(image: AnnotatedImage, box: BBox, out_h: int = DESK_SIZE[0], out_w: int = DESK_SIZE[1]) -> AnnotatedImage:
    """Crop to ``box`` and bilinearly resample to ``(out_h, out_w)``.

    Coordinates map as ``x' = (x - col_min) * out_w / box.width``; joint
    centers follow the same map.
    """
    h, w = image.pixels.shape
    if not (0 <= box.row_min <= box.row_max < h and 0 <= box.col_min <= box.col_max < w):
        raise ValidationError(f"box {box} invalid for {h}x{w} image")
    for j in image.joints:
        if not (box.col_min <= j.x <= box.col_max and box.row_min <= j.y <= box.row_max):
            raise CenterOutsideBox(f"joint {j.type_id} at ({j.x}, {j.y}) outside {box}")
    sx = out_w / box.width
    sy = out_h / box.height
    xs = box.col_min + np.arange(out_w, dtype=np.float64) / sx
    ys = box.row_min + np.arange(out_h, dtype=np.float64) / sy
    gx, gy = np.meshgrid(xs, ys)
    pixels = _kernels.bilinear(image.pixels, gx, gy)
    joints = [
        Joint(j.type_id, (j.x - box.col_min) * sx, (j.y - box.row_min) * sy, j.narrowing, j.erosion)
        for j in image.joints
    ]
    return image.with_(pixels=pixels, joints=joints)


def normalize_image(
    image: AnnotatedImage,
    out_h: int = DESK_SIZE[0],
    out_w: int = DESK_SIZE[1],
    **bbox_kwargs,
) -> AnnotatedImage:
    box = detect_bbox(image.pixels, **bbox_kwargs)
    if image.joints:
        # never crop away an annotated joint
        xs = [j.x for j in image.joints]
        ys = [j.y for j in image.joints]
        box = BBox(
            min(box.row_min, int(math.floor(min(ys)))),
            min(box.col_min, int(math.floor(min(xs)))),
            max(box.row_max, int(math.ceil(max(ys)))),
            max(box.col_max, int(math.ceil(max(xs)))),
        )
    return crop_resize(image, box, out_h, out_w)


def _default_center(w: float, h: float) -> tuple[float, float]:
    return (w - 1) / 2.0, (h - 1) / 2.0


def transform_point(
    x: float,
    y: float,
    spec: AugmentSpec,
    w: float,
    h: float,
    center: tuple[float, float] | None = None,
) -> tuple[float, float]:
    """Forward augmentation map: optional flip, then rotate+scale about the center."""
    cx, cy = center if center is not None else _default_center(w, h)
    if spec.hflip:
        x = w - 1 - x
    theta = math.radians(spec.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = x - cx, y - cy
    return cx + spec.scale * (c * dx - s * dy), cy + spec.scale * (s * dx + c * dy)


def _inverse_grid(spec: AugmentSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cx, cy = _default_center(w, h)
    theta = math.radians(spec.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    qx, qy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dx, dy = (qx - cx) / spec.scale, (qy - cy) / spec.scale
    px = cx + c * dx + s * dy
    py = cy - s * dx + c * dy
    if spec.hflip:
        px = w - 1 - px
    return px, py


def augment(image: AnnotatedImage, spec: AugmentSpec) -> AnnotatedImage:
    """Apply ``spec`` to pixels (inverse-mapped bilinear) and to joint centers."""
    if spec.is_identity():
        return image.with_(pixels=image.pixels.copy(), joints=list(image.joints))
    h, w = image.pixels.shape
    joints = []
    for j in image.joints:
        x, y = transform_point(j.x, j.y, spec, w, h)
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise CenterLost(f"joint {j.type_id} moved to ({x:.2f}, {y:.2f}) outside {w}x{h}")
        joints.append(Joint(j.type_id, x, y, j.narrowing, j.erosion))
    px, py = _inverse_grid(spec, h, w)
    pixels = _kernels.bilinear(image.pixels, px, py)
    side = image.side.flipped() if spec.hflip else image.side
    return image.with_(pixels=pixels, joints=joints, side=side)


def augment_or_identity(image: AnnotatedImage, seeds, ranges: AugmentRanges = AugmentRanges()) -> tuple[AnnotatedImage, AugmentSpec]:
    """Try each seed in turn; fall back to the identity when every draw loses a center."""
    for seed in seeds:
        spec = draw_augment_spec(int(seed), ranges)
        try:
            return augment(image, spec), spec
        except CenterLost:
            continue
    return augment(image, AugmentSpec()), AugmentSpec()
