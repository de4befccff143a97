"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import LossWeights, NetworkConfig, forward, init_params, loss, loss_and_gradients
from .records import AnnotatedImage, Joint
from .schema import Limb, Side
from .targets import MaskConfig, SmoothingConfig, build_pixel_targets

TINY = NetworkConfig(depth=1, base_channels=2, in_h=8, in_w=8)
# entries with both gradients below this are compared on an absolute scale
REL_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int
    seconds: float


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_problem(seed: int = 0, cfg: NetworkConfig = TINY):
    """float64 params (perturbed off their init values), one foot image and its targets."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, dtype=np.float64)
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.1, params[name].shape)
    h, w = cfg.in_h, cfg.in_w
    joints = [Joint(0, 0.25 * (w - 1), 0.25 * (h - 1), 1, 3), Joint(1, 0.8 * (w - 1), 0.7 * (h - 1), 4, 7)]
    image = AnnotatedImage(rng.random((h, w)), Limb.FOOT, Side.LEFT, joints)
    targets = build_pixel_targets(image, mask_cfg=MaskConfig(2.0, 3.0), smooth_cfg=SmoothingConfig(0.1))
    return params, image, targets


def run_gradcheck(
    seed: int = 0,
    step: float = 1e-5,
    cfg: NetworkConfig = TINY,
    weights: LossWeights = LossWeights(),
) -> GradcheckResult:
    start = time.perf_counter()
    params, image, targets = tiny_problem(seed, cfg)
    _, _, grads = loss_and_gradients(params, cfg, image.pixels, targets, weights)
    worst, worst_name, count = 0.0, "", 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(forward(params, cfg, image.pixels), targets, weights)[0]
            flat[i] = orig - step
            down = loss(forward(params, cfg, image.pixels), targets, weights)[0]
            flat[i] = orig
            err = relative_error(float(gflat[i]), (up - down) / (2 * step))
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradcheckResult(worst, worst_name, count, time.perf_counter() - start)
