"""Spatial upsampling of attention maps, plus channel repetition.

All methods share one coordinate convention: half-pixel centers with
edge-clamp padding, src = (dst + 0.5) * (in / out) - 0.5.  Each method is
separable, so a resize is two small dense matrix products (rows then
columns); the backward pass applies the transposed matrices, which makes
every method exactly differentiable by construction.

Bicubic uses the Catmull-Rom kernel (a = -0.5).
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, ShapeError, Tensor4, record

METHODS = ("nearest", "bilinear", "bicubic")


def _cubic_weight(d: np.ndarray) -> np.ndarray:
    # Keys kernel with a = -0.5
    d = np.abs(d)
    w = np.zeros_like(d)
    near = d <= 1.0
    far = (d > 1.0) & (d < 2.0)
    w[near] = (1.5 * d[near] - 2.5) * d[near] ** 2 + 1.0
    w[far] = ((-0.5 * d[far] + 2.5) * d[far] - 4.0) * d[far] + 2.0
    return w


def axis_weights(in_size: int, out_size: int, method: str,
                 dtype=np.float64) -> np.ndarray:
    """Dense (out_size, in_size) interpolation matrix for one axis."""
    if method not in METHODS:
        raise ContractError(f"unknown upsample method {method!r} (want one of {METHODS})")
    if out_size < in_size:
        raise ContractError(f"downscale requested ({in_size} -> {out_size})")
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    if method == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(int), 0, in_size - 1)
        mat[np.arange(out_size), idx] = 1.0
    elif method == "bilinear":
        i0 = np.floor(src).astype(int)
        frac = src - i0
        for tap, wt in ((i0, 1.0 - frac), (i0 + 1, frac)):
            np.add.at(mat, (np.arange(out_size), np.clip(tap, 0, in_size - 1)), wt)
    else:  # bicubic
        i0 = np.floor(src).astype(int)
        frac = src - i0
        for off in (-1, 0, 1, 2):
            wt = _cubic_weight(frac - off)
            np.add.at(mat, (np.arange(out_size), np.clip(i0 + off, 0, in_size - 1)), wt)
    return mat.astype(dtype)


def upsample(t: Tensor4, method: str, out_h: int, out_w: int) -> Tensor4:
    """Per-channel 2-D upsampling to (out_h, out_w); differentiable."""
    rows = axis_weights(t.h, out_h, method, t.dtype)
    cols = axis_weights(t.w, out_w, method, t.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rows, t.data, cols, optimize=True)

    def grad_fn(g):
        return (np.einsum("oh,ncop,pw->nchw", rows, g, cols, optimize=True),)

    return record(np.ascontiguousarray(out), (t,), grad_fn)


def channel_repeat(t: Tensor4, k: int) -> Tensor4:
    """Repeat each channel k times consecutively: output channel j is input
    channel j // k.  Backward sums the gradient over the k copies."""
    if k < 1:
        raise ContractError(f"channel_repeat factor must be >= 1, got {k}")
    if k == 1:
        return record(t.data.copy(), (t,), lambda g: (g,))
    n, c, h, w = t.shape

    def grad_fn(g):
        return (g.reshape(n, c, k, h, w).sum(axis=2),)

    return record(np.repeat(t.data, k, axis=1), (t,), grad_fn)


def resize_image_np(img: np.ndarray, out_h: int, out_w: int,
                    method: str = "bilinear") -> np.ndarray:
    """Plain-numpy resize of a (c,h,w) image, allowing downscale.

    Loader-side helper only; the differentiable path is `upsample`.
    Uses the same half-pixel/edge-clamp convention, applied in both
    directions without the upscale-only guard.
    """
    c, h, w = img.shape
    rows = _any_scale_weights(h, out_h, method)
    cols = _any_scale_weights(w, out_w, method)
    return np.einsum("oh,chw,pw->cop", rows, img.astype(np.float64), cols,
                     optimize=True).astype(img.dtype)


def _any_scale_weights(in_size: int, out_size: int, method: str) -> np.ndarray:
    if out_size >= in_size:
        return axis_weights(in_size, out_size, method)
    # downscale: area-style averaging over the source span of each output cell
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, in_size)):
            cover = min(hi, i + 1) - max(lo, i)
            if cover > 0:
                mat[o, i] = cover / scale
    return mat
