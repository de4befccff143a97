"""Time the numba kernels against their pure-numpy fallbacks, plus one full train step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The train-step rows run in a subprocess per backend because the backend is
chosen from SVH_NUMBA at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from svhscore import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from svhscore.model import NetworkConfig, init_params
from svhscore.synth import SynthConfig, make_patient
from svhscore.targets import build_pixel_targets
from svhscore.train import OptimizerState, TrainConfig, train_step
net = NetworkConfig(); cfg = TrainConfig()
rec = make_patient(0, "P00", SynthConfig())
ims = list(rec.images.values())
batch = (np.stack([i.pixels for i in ims]).astype(np.float32), [build_pixel_targets(i) for i in ims])
params = init_params(net, 0); opt = OptimizerState.zeros_like(params)
train_step(params, opt, batch, 1e-3, cfg, net)
t = time.perf_counter()
for _ in range({n}):
    train_step(params, opt, batch, 1e-3, cfg, net)
print((time.perf_counter() - t) / {n})
"""


def cases(rng: np.random.Generator):
    x = rng.standard_normal((4, 64, 64, 8)).astype(np.float32)
    cols = K.numpy_impl.im2col(x, 1)
    img = rng.random((928, 864))
    xs = rng.uniform(0, 863, 64 * 64)
    ys = rng.uniform(0, 927, 64 * 64)
    strong = rng.random((256, 256)) > 0.995
    weak = rng.random((256, 256)) > 0.5
    cx, cy = rng.uniform(0, 63, 21), rng.uniform(0, 63, 21)
    ids = np.arange(21)
    return {
        "im2col 4x64x64x8": lambda impl: impl.im2col(x, 1),
        "col2im 4x64x64x8": lambda impl: impl.col2im(cols, 4, 64, 64, 8, 1),
        "bilinear 64x64 from 928x864": lambda impl: impl.bilinear(img, xs, ys),
        "hysteresis 256x256": lambda impl: impl.hysteresis(strong, weak),
        "nearest_labels 21 joints 64x64": lambda impl: impl.nearest_labels(cx, cy, ids, 32.0, 40.0, 64, 64, 21),
    }


def train_step_time(numba_on: bool, n: int) -> float:
    env = dict(os.environ, SVH_NUMBA="1" if numba_on else "0")
    out = subprocess.run(
        [sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, capture_output=True, text=True, check=True
    )
    return float(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if K.numba_impl is None:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        fn(K.numba_impl)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(K.numpy_impl), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(K.numba_impl), number=1, repeat=args.repeat))
        print(f"{name:34s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f}x")

    n = max(args.repeat // 2, 3)
    t_np, t_nb = train_step_time(False, n), train_step_time(True, n)
    print(f"{'train step (batch 4, default net)':34s} {t_np * 1e3:10.1f} {t_nb * 1e3:10.1f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
