"""Per-pixel training targets: segmentation masks and locally smoothed score labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import IGNORE
from .errors import InvalidConfig, MissingScore
from .records import AnnotatedImage
from .schema import DEFAULT_SCHEMA, N_EROSION_CLASSES, N_NARROWING_CLASSES, JointSchema, Limb, Task


@dataclass(frozen=True)
class MaskConfig:
    r: float = 32.0
    R: float = 40.0

    def __post_init__(self):
        if not (0 <= self.r <= self.R):
            raise InvalidConfig(f"mask radii need 0 <= r <= R, got r={self.r}, R={self.R}")


@dataclass(frozen=True)
class SmoothingConfig:
    p: float = 0.1

    def __post_init__(self):
        if not (0 <= self.p < 1):
            raise InvalidConfig(f"smoothing p must lie in [0, 1), got {self.p}")


@dataclass
class PixelTargets:
    seg: np.ndarray  # (H, W) int16, IGNORE where excluded
    narrowing_target: np.ndarray  # (H, W, 5)
    narrowing_valid: np.ndarray  # (H, W) bool
    erosion_target: np.ndarray  # (H, W, 6)
    erosion_valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.seg.shape


def build_mask(centers, cfg: MaskConfig, h: int, w: int, background: int = DEFAULT_SCHEMA.background_class) -> np.ndarray:
    """Segmentation map from ``(type_id, x, y)`` joint centers.

    Nearest joint within ``r`` labels the pixel, beyond ``R`` is background
    and the band in between is ``IGNORE``.
    """
    if len(centers) == 0:
        return np.full((h, w), background, dtype=np.int16)
    return _kernels.nearest_labels(centers, cfg.r, cfg.R, h, w, background)


def smooth_label(x: int, k: int, cfg: SmoothingConfig) -> np.ndarray:
    if not 0 <= x < k:
        raise ValueError(f"class {x} outside [0, {k})")
    p = cfg.p
    out = np.zeros(k)
    out[x] = 1.0 - p
    for n in (x - 1, x + 1):
        if 0 <= n < k:
            out[n] += p / 2
        else:
            out[x] += p / 2
    return out


def fractional_target(t: float, k: int, cfg: SmoothingConfig) -> np.ndarray:
    """Smoothed target for a real-valued grade: split between floor and ceil, then smooth each."""
    if not 0 <= t <= k - 1:
        raise ValueError(f"target {t} outside [0, {k - 1}]")
    lo = int(math.floor(t))
    frac = t - lo
    if frac == 0.0:
        return smooth_label(lo, k, cfg)
    return (1.0 - frac) * smooth_label(lo, k, cfg) + frac * smooth_label(lo + 1, k, cfg)


def erosion_target(score: int, limb: Limb, cfg: SmoothingConfig) -> np.ndarray:
    if limb is Limb.FOOT:
        return fractional_target(score / 2.0, N_EROSION_CLASSES, cfg)
    return smooth_label(score, N_EROSION_CLASSES, cfg)


def build_pixel_targets(
    image: AnnotatedImage,
    schema: JointSchema = DEFAULT_SCHEMA,
    mask_cfg: MaskConfig = MaskConfig(),
    smooth_cfg: SmoothingConfig = SmoothingConfig(),
) -> PixelTargets:
    h, w = image.pixels.shape
    seg = build_mask(image.centers(), mask_cfg, h, w, schema.background_class)
    narrow = np.zeros((h, w, N_NARROWING_CLASSES))
    erosion = np.zeros((h, w, N_EROSION_CLASSES))
    narrow_valid = np.zeros((h, w), dtype=bool)
    erosion_valid = np.zeros((h, w), dtype=bool)
    for joint in image.joints:
        region = seg == joint.type_id
        if schema.scored(joint.type_id, Task.NARROWING, image.limb):
            if joint.narrowing is None:
                raise MissingScore(f"joint {joint.type_id} on {image.key} lacks a narrowing score")
            narrow[region] = smooth_label(joint.narrowing, N_NARROWING_CLASSES, smooth_cfg)
            narrow_valid |= region
        if schema.scored(joint.type_id, Task.EROSION, image.limb):
            if joint.erosion is None:
                raise MissingScore(f"joint {joint.type_id} on {image.key} lacks an erosion score")
            erosion[region] = erosion_target(joint.erosion, image.limb, smooth_cfg)
            erosion_valid |= region
    return PixelTargets(seg, narrow, narrow_valid, erosion, erosion_valid)


# fixed 22-colour palette for debug exports; index 255 marks IGNORE
_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (0, 0, 0),
]


def export_mask_png(seg: np.ndarray, path) -> None:
    """Indexed PNG of a segmentation map; IGNORE pixels are transparent."""
    from PIL import Image

    idx = np.where(seg == IGNORE, 255, seg).astype(np.uint8)
    im = Image.fromarray(idx, mode="P")
    flat = [c for rgb in _PALETTE for c in rgb]
    flat += [0] * (768 - len(flat))
    im.putpalette(flat)
    im.info["transparency"] = 255
    im.save(path, format="PNG", transparency=255)
