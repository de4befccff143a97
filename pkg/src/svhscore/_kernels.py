"""Per-pixel inner loops.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical results. ``SVH_NUMBA=0`` (or a missing numba
install) selects the numpy path at import time. Both implementations stay
importable as ``numba_impl`` / ``numpy_impl`` for tests and benchmarks.
"""

from __future__ import annotations

import os
import types

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IGNORE = -1

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SVH_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------- numpy path


def _nearest_labels_np(cx, cy, ids, r, R, h, w, background):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    best_d = np.full((h, w), np.inf)
    best_id = np.full((h, w), IGNORE, dtype=np.int16)
    for k in range(len(ids)):
        # hypot rather than sqrt(dx*dx + dy*dy): squaring tiny offsets underflows to 0
        d = np.hypot(xs - cx[k], ys - cy[k])
        # centers arrive sorted by id, so strict < keeps the lowest id on ties
        closer = d < best_d
        best_d = np.where(closer, d, best_d)
        best_id = np.where(closer, np.int16(ids[k]), best_id)
    seg = np.full((h, w), IGNORE, dtype=np.int16)
    seg[best_d <= r] = best_id[best_d <= r]
    seg[best_d > R] = background
    return seg


def _bilinear_np(img, xs, ys):
    h, w = img.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(ok, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
            out += wy * wx * vals
    return out


def _hysteresis_np(strong, weak):
    kept = strong.copy()
    candidates = strong | weak
    while True:
        grown = np.zeros_like(kept)
        padded = np.pad(kept, 1)
        h, w = kept.shape
        for dy in range(3):
            for dx in range(3):
                grown |= padded[dy : dy + h, dx : dx + w]
        grown &= candidates
        if np.array_equal(grown, kept):
            return kept
        kept = grown


def _im2col_np(x, stride):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win).reshape(-1, c * 9)


def _col2im_np(dcols, n, h, w, c, stride):
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    d = dcols.reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += d[..., ky, kx]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1])


numpy_impl = types.SimpleNamespace(
    nearest_labels=_nearest_labels_np,
    bilinear=_bilinear_np,
    hysteresis=_hysteresis_np,
    im2col=_im2col_np,
    col2im=_col2im_np,
)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _nearest_labels_nb(cx, cy, ids, r, R, h, w, background):
        seg = np.empty((h, w), dtype=np.int16)
        n = ids.shape[0]
        for i in range(h):
            for j in range(w):
                best_d = np.inf
                best = IGNORE
                for k in range(n):
                    d = np.hypot(j - cx[k], i - cy[k])
                    if d < best_d:
                        best_d = d
                        best = ids[k]
                if best_d <= r:
                    seg[i, j] = best
                elif best_d > R:
                    seg[i, j] = background
                else:
                    seg[i, j] = IGNORE
        return seg

    @numba.njit(cache=True)
    def _bilinear_nb(img, xs, ys):
        h, w = img.shape
        flat_x = xs.ravel()
        flat_y = ys.ravel()
        out = np.zeros(flat_x.shape[0], dtype=np.float64)
        for k in range(flat_x.shape[0]):
            x = flat_x[k]
            y = flat_y[k]
            x0 = np.floor(x)
            y0 = np.floor(y)
            fx = x - x0
            fy = y - y0
            ix = int(x0)
            iy = int(y0)
            acc = 0.0
            for dy in range(2):
                yy = iy + dy
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xx = ix + dx
                    wx = fx if dx == 1 else 1.0 - fx
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += wy * wx * img[yy, xx]
            out[k] = acc
        return out.reshape(xs.shape)

    @numba.njit(cache=True)
    def _hysteresis_nb(strong, weak):
        h, w = strong.shape
        kept = strong.copy()
        stack_y = np.empty(h * w, dtype=np.int64)
        stack_x = np.empty(h * w, dtype=np.int64)
        top = 0
        for i in range(h):
            for j in range(w):
                if strong[i, j]:
                    stack_y[top] = i
                    stack_x[top] = j
                    top += 1
        while top > 0:
            top -= 1
            i = stack_y[top]
            j = stack_x[top]
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    y = i + di
                    x = j + dj
                    if 0 <= y < h and 0 <= x < w and not kept[y, x] and weak[y, x]:
                        kept[y, x] = True
                        stack_y[top] = y
                        stack_x[top] = x
                        top += 1
        return kept

    @numba.njit(cache=True)
    def _im2col_nb(x, stride):
        n, h, w, c = x.shape
        ho = (h - 1) // stride + 1
        wo = (w - 1) // stride + 1
        cols = np.zeros((n * ho * wo, c * 9), dtype=x.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for ky in range(3):
                        y = i * stride + ky - 1
                        if y < 0 or y >= h:
                            continue
                        for kx in range(3):
                            xx = j * stride + kx - 1
                            if xx < 0 or xx >= w:
                                continue
                            for ch in range(c):
                                cols[row, ch * 9 + ky * 3 + kx] = x[b, y, xx, ch]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(dcols, n, h, w, c, stride):
        ho = (h - 1) // stride + 1
        wo = (w - 1) // stride + 1
        dx = np.zeros((n, h, w, c), dtype=dcols.dtype)
        # kernel offsets outermost: same summation order as the numpy path
        for ky in range(3):
            for kx in range(3):
                k = ky * 3 + kx
                for b in range(n):
                    for i in range(ho):
                        y = i * stride + ky - 1
                        if y < 0 or y >= h:
                            continue
                        for j in range(wo):
                            xx = j * stride + kx - 1
                            if xx < 0 or xx >= w:
                                continue
                            row = (b * ho + i) * wo + j
                            for ch in range(c):
                                dx[b, y, xx, ch] += dcols[row, ch * 9 + k]
        return dx

    numba_impl = types.SimpleNamespace(
        nearest_labels=_nearest_labels_nb,
        bilinear=_bilinear_nb,
        hysteresis=_hysteresis_nb,
        im2col=_im2col_nb,
        col2im=_col2im_nb,
    )
else:  # pragma: no cover
    numba_impl = None


_active = numba_impl if USE_NUMBA else numpy_impl


def nearest_labels(centers, r: float, R: float, h: int, w: int, background: int) -> np.ndarray:
    """Three-way label map from ``(type_id, x, y)`` centers.

    Pixel (row i, col j) sits at (x=j, y=i). Nearest center wins, ties go to
    the lower type id; distance ``<= r`` gives the joint id, ``> R`` gives
    ``background`` and anything between gives ``IGNORE``.
    """
    ordered = sorted(centers, key=lambda c: c[0])
    ids = np.array([c[0] for c in ordered], dtype=np.int64)
    cx = np.array([c[1] for c in ordered], dtype=np.float64)
    cy = np.array([c[2] for c in ordered], dtype=np.float64)
    return _active.nearest_labels(cx, cy, ids, float(r), float(R), int(h), int(w), int(background))


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; taps outside the image read 0."""
    return _active.bilinear(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(xs, dtype=np.float64),
        np.ascontiguousarray(ys, dtype=np.float64),
    )


def hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Weak pixels 8-connected (through weak pixels) to a strong pixel, plus the strong ones."""
    return _active.hysteresis(np.ascontiguousarray(strong, dtype=bool), np.ascontiguousarray(weak, dtype=bool))


def im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """3x3, pad-1 patches of an NHWC batch as rows ordered (channel, ky, kx)."""
    return _active.im2col(np.ascontiguousarray(x), int(stride))


def col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to an NHWC batch."""
    n, h, w, c = shape
    return _active.col2im(np.ascontiguousarray(dcols), n, h, w, c, int(stride))


def backend() -> str:
    return "numba" if _active is numba_impl else "numpy"
