"""Small U-Net with coordinate channels and three per-pixel heads.

Everything runs channels-last (N, H, W, C). Convolutions are im2col + one
matrix product; the backward pass is written by hand and mirrors the
forward traversal exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from . import _kernels
from ._kernels import IGNORE
from .errors import InvalidConfig, IoFailure, NoSupervision, ShapeMismatch
from .targets import PixelTargets

HEADS = ("seg", "narrowing", "erosion")
GN_EPS = 1e-5

Params = dict  # ordered name -> ndarray


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3
    base_channels: int = 8
    in_h: int = 64
    in_w: int = 64
    norm_groups: int = 4
    head_classes: tuple[int, int, int] = (22, 5, 6)

    def __post_init__(self):
        object.__setattr__(self, "head_classes", tuple(int(k) for k in self.head_classes))
        if self.depth < 1 or self.base_channels < 2 or self.norm_groups < 1:
            raise InvalidConfig(f"invalid network config {self}")
        step = 2**self.depth
        if self.in_h % step or self.in_w % step:
            raise InvalidConfig(f"input {self.in_h}x{self.in_w} not divisible by 2^{self.depth}")
        if len(self.head_classes) != 3:
            raise InvalidConfig("head_classes needs three entries")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def groups(self, channels: int) -> int:
        # largest divisor of `channels` not above norm_groups
        return math.gcd(self.norm_groups, channels)


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    narrowing: float = 1.0
    erosion: float = 1.0

    def __post_init__(self):
        vals = (self.seg, self.narrowing, self.erosion)
        if min(vals) < 0 or sum(vals) <= 0:
            raise InvalidConfig(f"loss weights must be >= 0 and not all zero, got {vals}")

    def as_tuple(self) -> tuple[float, float, float]:
        return self.seg, self.narrowing, self.erosion


# ------------------------------------------------------------------ params


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []

    def conv(name, cout, cin, k=3):
        shapes.append((f"{name}.w", (cout, cin, k, k)))
        shapes.append((f"{name}.b", (cout,)))

    def norm(name, c):
        shapes.append((f"{name}.gamma", (c,)))
        shapes.append((f"{name}.beta", (c,)))

    cin = 3
    for i in range(cfg.depth):
        c = cfg.channels(i)
        conv(f"enc{i}.conv1", c, cin)
        norm(f"enc{i}.norm1", c)
        conv(f"enc{i}.conv2", c, c)
        norm(f"enc{i}.norm2", c)
        conv(f"enc{i}.down", cfg.channels(i + 1), c)
        norm(f"enc{i}.down_norm", cfg.channels(i + 1))
        cin = cfg.channels(i + 1)
    for i in reversed(range(cfg.depth)):
        c = cfg.channels(i)
        shapes.append((f"dec{i}.up.w", (cfg.channels(i + 1), c, 2, 2)))
        shapes.append((f"dec{i}.up.b", (c,)))
        conv(f"dec{i}.conv1", c, 2 * c)
        norm(f"dec{i}.norm1", c)
        conv(f"dec{i}.conv2", c, c)
        norm(f"dec{i}.norm2", c)
    for head, k in zip(HEADS, cfg.head_classes):
        conv(f"head.{head}", k, cfg.channels(0), k=1)
    return shapes


def param_count(cfg: NetworkConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Fan-in scaled uniform kernels, zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            if name.endswith("up.w"):
                fan_in, gain = shape[0], 3.0
            elif name.startswith("head."):
                fan_in, gain = shape[1], 3.0
            else:
                fan_in, gain = shape[1] * shape[2] * shape[3], 6.0
            bound = math.sqrt(gain / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "gamma":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def is_decay_exempt(name: str) -> bool:
    return name.endswith((".b", ".gamma", ".beta"))


# ------------------------------------------------------------------ layers


def _conv3x3(x, w, b, stride):
    n, h, wd, c = x.shape
    cout = w.shape[0]
    cols = _kernels.im2col(x, stride)
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    y = cols @ w.reshape(cout, c * 9).T
    y += b
    return y.reshape(n, ho, wo, cout), (cols, x.shape, stride)


def _conv3x3_back(dy, w, cache, need_dx=True):
    cols, xshape, stride = cache
    n, h, wd, c = xshape
    cout = w.shape[0]
    _, ho, wo, _ = dy.shape
    dy2 = dy.reshape(-1, cout)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = _col_sum(dy2)
    if not need_dx:
        return None, dw, db
    dcols = dy2 @ w.reshape(cout, c * 9)
    return _kernels.col2im(dcols, xshape, stride), dw, db


def _hw_sum(x3):
    """Sum over the middle axis of (N, P, C) via a matrix product."""
    ones = np.ones((x3.shape[0], 1, x3.shape[1]), dtype=x3.dtype)
    return (ones @ x3)[:, 0]


def _col_sum(a2):
    return (np.ones((1, a2.shape[0]), dtype=a2.dtype) @ a2)[0]


def _group_expand(per_channel, groups):
    """(N, C) channel sums -> (N, 1, C) group sums broadcast back over channels."""
    n, c = per_channel.shape
    g = per_channel.reshape(n, groups, c // groups).sum(axis=-1)
    return np.repeat(g, c // groups, axis=1)[:, None, :]


def _group_norm(x, gamma, beta, groups):
    n, h, w, c = x.shape
    m = h * w * (c // groups)
    x3 = x.reshape(n, h * w, c)
    mean = _group_expand(_hw_sum(x3), groups) / m
    d = x3 - mean
    var = _group_expand(_hw_sum(d * d), groups) / m
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = d * inv
    return (xhat * gamma + beta).reshape(x.shape), (xhat, inv, groups)


def _group_norm_back(dy, gamma, cache):
    xhat, inv, groups = cache
    n, h, w, c = dy.shape
    m = h * w * (c // groups)
    dy3 = dy.reshape(n, h * w, c)
    dgamma = _hw_sum(dy3 * xhat).sum(axis=0)
    dbeta = _hw_sum(dy3).sum(axis=0)
    dxhat = dy3 * gamma
    s1 = _group_expand(_hw_sum(dxhat), groups)
    s2 = _group_expand(_hw_sum(dxhat * xhat), groups)
    dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
    return dx.reshape(dy.shape), dgamma, dbeta


def _block(x, params, conv, norm, groups, stride=1):
    y, cc = _conv3x3(x, params[f"{conv}.w"], params[f"{conv}.b"], stride)
    y, nc = _group_norm(y, params[f"{norm}.gamma"], params[f"{norm}.beta"], groups)
    mask = y > 0
    return y * mask, (cc, nc, mask)


def _block_back(dy, params, conv, norm, cache, need_dx=True):
    cc, nc, mask = cache
    dy = dy * mask
    dy, dgamma, dbeta = _group_norm_back(dy, params[f"{norm}.gamma"], nc)
    dx, dw, db = _conv3x3_back(dy, params[f"{conv}.w"], cc, need_dx)
    return dx, {f"{conv}.w": dw, f"{conv}.b": db, f"{norm}.gamma": dgamma, f"{norm}.beta": dbeta}


def _upconv(x, w, b):
    # 2x2 kernel, stride 2: every input pixel owns a disjoint 2x2 output patch
    n, h, wd, cin = x.shape
    cout = w.shape[1]
    y = x.reshape(-1, cin) @ w.reshape(cin, cout * 4)
    y = y.reshape(n, h, wd, cout, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h, 2 * wd, cout)
    return y + b, x


def _upconv_back(dy, w, x):
    n, h, wd, cin = x.shape
    cout = w.shape[1]
    d = dy.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 5, 2, 4).reshape(-1, cout * 4)
    dw = (x.reshape(-1, cin).T @ d).reshape(w.shape)
    dx = (d @ w.reshape(cin, cout * 4).T).reshape(x.shape)
    return dx, dw, _col_sum(dy.reshape(-1, cout))


def coord_channels(h: int, w: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    xs = np.broadcast_to(np.linspace(0.0, 1.0, w, dtype=dtype)[None, :], (h, w))
    ys = np.broadcast_to(np.linspace(0.0, 1.0, h, dtype=dtype)[:, None], (h, w))
    return xs, ys


def make_input(images: np.ndarray, dtype) -> np.ndarray:
    """Stack intensity with normalized x and y coordinate channels."""
    n, h, w = images.shape
    xs, ys = coord_channels(h, w, dtype)
    out = np.empty((n, h, w, 3), dtype=dtype)
    out[..., 0] = images
    out[..., 1] = xs
    out[..., 2] = ys
    return out


# ------------------------------------------------------------------ forward/backward


def _check_input(params: Params, cfg: NetworkConfig, images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1:] != (cfg.in_h, cfg.in_w):
        raise ShapeMismatch(f"expected images of shape (N, {cfg.in_h}, {cfg.in_w}), got {images.shape}")
    return images


def _forward(params: Params, cfg: NetworkConfig, images, keep: bool):
    images = _check_input(params, cfg, images)
    dtype = params["head.seg.w"].dtype
    h = make_input(images, dtype)
    tape = {}
    skips = []
    for i in range(cfg.depth):
        g = cfg.groups(cfg.channels(i))
        h, tape[f"enc{i}.1"] = _block(h, params, f"enc{i}.conv1", f"enc{i}.norm1", g)
        h, tape[f"enc{i}.2"] = _block(h, params, f"enc{i}.conv2", f"enc{i}.norm2", g)
        skips.append(h)
        gd = cfg.groups(cfg.channels(i + 1))
        h, tape[f"enc{i}.down"] = _block(h, params, f"enc{i}.down", f"enc{i}.down_norm", gd, stride=2)
    for i in reversed(range(cfg.depth)):
        g = cfg.groups(cfg.channels(i))
        u, tape[f"dec{i}.up"] = _upconv(h, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"])
        h = np.concatenate([u, skips[i]], axis=-1)
        h, tape[f"dec{i}.1"] = _block(h, params, f"dec{i}.conv1", f"dec{i}.norm1", g)
        h, tape[f"dec{i}.2"] = _block(h, params, f"dec{i}.conv2", f"dec{i}.norm2", g)
    feat = h.reshape(-1, h.shape[-1])
    logits = []
    for head in HEADS:
        w = params[f"head.{head}.w"]
        y = feat @ w.reshape(w.shape[0], -1).T + params[f"head.{head}.b"]
        logits.append(y.reshape(*h.shape[:3], w.shape[0]))
    tape["feat"] = h
    return tuple(logits), (tape if keep else None)


def forward(params: Params, cfg: NetworkConfig, images):
    """Logits per head, channels-last: ``(N, H, W, K)`` for K in (22, 5, 6).

    A single (H, W) image is treated as a batch of one.
    """
    logits, _ = _forward(params, cfg, images, keep=False)
    return logits


def _backward(params: Params, cfg: NetworkConfig, tape, dlogits) -> Params:
    grads = {}
    feat = tape["feat"]
    fl = feat.reshape(-1, feat.shape[-1])
    dfeat = np.zeros_like(fl)
    for head, dl in zip(HEADS, dlogits):
        w = params[f"head.{head}.w"]
        d2 = dl.reshape(-1, w.shape[0])
        grads[f"head.{head}.w"] = (d2.T @ fl).reshape(w.shape)
        grads[f"head.{head}.b"] = _col_sum(d2)
        dfeat += d2 @ w.reshape(w.shape[0], -1)
    dh = dfeat.reshape(feat.shape)
    dskips = [None] * cfg.depth
    for i in range(cfg.depth):
        dh, g = _block_back(dh, params, f"dec{i}.conv2", f"dec{i}.norm2", tape[f"dec{i}.2"])
        grads.update(g)
        dh, g = _block_back(dh, params, f"dec{i}.conv1", f"dec{i}.norm1", tape[f"dec{i}.1"])
        grads.update(g)
        c = cfg.channels(i)
        du, dskips[i] = dh[..., :c], dh[..., c:]
        dh, dw, db = _upconv_back(du, params[f"dec{i}.up.w"], tape[f"dec{i}.up"])
        grads[f"dec{i}.up.w"], grads[f"dec{i}.up.b"] = dw, db
    for i in reversed(range(cfg.depth)):
        dh, g = _block_back(dh, params, f"enc{i}.down", f"enc{i}.down_norm", tape[f"enc{i}.down"])
        grads.update(g)
        dh = dh + dskips[i]
        dh, g = _block_back(dh, params, f"enc{i}.conv2", f"enc{i}.norm2", tape[f"enc{i}.2"])
        grads.update(g)
        dh, g = _block_back(dh, params, f"enc{i}.conv1", f"enc{i}.norm1", tape[f"enc{i}.1"], need_dx=i > 0)
        grads.update(g)
    return {name: grads[name] for name in params}


# ------------------------------------------------------------------ loss


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _hard_ce(logits, labels):
    """Mean cross-entropy over labelled pixels, and its gradient."""
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    logp = _log_softmax(logits)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(np.where(valid, picked, 0.0).sum()) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1, axis=-1)
    grad = np.where(valid[..., None], grad, 0.0) / n
    return loss, grad.astype(logits.dtype, copy=False), n


def _soft_ce(logits, target, valid):
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    logp = _log_softmax(logits)
    q = np.where(valid[..., None], target, 0.0).astype(logits.dtype, copy=False)
    loss = -float((q * logp).sum()) / n
    grad = np.where(valid[..., None], np.exp(logp) - q, 0.0) / n
    return loss, grad.astype(logits.dtype, copy=False), n


def _stack_targets(targets):
    if isinstance(targets, PixelTargets):
        targets = [targets]
    return list(targets)


def loss_and_dlogits(logits, targets, weights: LossWeights = LossWeights()):
    """Batch loss (mean of per-image weighted averages), its terms, and dL/dlogits."""
    targets = _stack_targets(targets)
    seg_l, nar_l, ero_l = logits
    n_img = seg_l.shape[0]
    if len(targets) != n_img:
        raise ShapeMismatch(f"{len(targets)} targets for {n_img} images")
    lam = np.array(weights.as_tuple())
    lam_sum = lam.sum()
    total = 0.0
    terms = np.zeros(3)
    grads = [np.zeros_like(seg_l), np.zeros_like(nar_l), np.zeros_like(ero_l)]
    for b, t in enumerate(targets):
        if t.seg.shape != seg_l.shape[1:3]:
            raise ShapeMismatch(f"target shape {t.seg.shape} vs logits {seg_l.shape[1:3]}")
        parts = (
            _hard_ce(seg_l[b], t.seg),
            _soft_ce(nar_l[b], t.narrowing_target, t.narrowing_valid),
            _soft_ce(ero_l[b], t.erosion_target, t.erosion_valid),
        )
        if all(p[2] == 0 for p in parts):
            raise NoSupervision(f"image {b} has no supervised pixel in any term")
        vals = np.array([p[0] for p in parts])
        terms += vals / n_img
        total += float(lam @ vals) / lam_sum / n_img
        for k, p in enumerate(parts):
            grads[k][b] = p[1] * (lam[k] / lam_sum / n_img)
    return total, terms, grads


def loss(logits, targets, weights: LossWeights = LossWeights()):
    """Return ``(total, (L_seg, L_narrowing, L_erosion))``."""
    total, terms, _ = loss_and_dlogits(logits, targets, weights)
    return total, tuple(float(t) for t in terms)


def loss_and_gradients(params: Params, cfg: NetworkConfig, images, targets, weights: LossWeights = LossWeights()):
    logits, tape = _forward(params, cfg, images, keep=True)
    total, terms, dlogits = loss_and_dlogits(logits, targets, weights)
    return total, terms, _backward(params, cfg, tape, dlogits)


def gradients(params: Params, cfg: NetworkConfig, image, targets, weights: LossWeights = LossWeights()) -> Params:
    """Exact gradient of the total loss for one image (or a batch) w.r.t. every parameter."""
    return loss_and_gradients(params, cfg, image, targets, weights)[2]


# ------------------------------------------------------------------ checkpoints

MAGIC = b"SVHC"
FORMAT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: NetworkConfig, metadata: dict | None = None) -> Path:
    """Magic, version, JSON header, then float32 little-endian tensors in parameter order."""
    path = Path(path)
    header = {
        "network": asdict(cfg),
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for arr in params.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[Params, NetworkConfig, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise IoFailure(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise IoFailure(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    cfg = NetworkConfig(**header["network"])
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise IoFailure(f"{path}: {len(data) - offset} trailing bytes")
    return params, cfg, header["metadata"]
