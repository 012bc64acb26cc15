"""Independent correctness references for the loss stack.

Two deliberately slow paths that share no math code with the kernels:

* central finite-difference gradients of any scalar function, and
* straight-line re-derivations of every loss component with explicit
  Python loops over batch, group, channel and pixel indices, using
  ``math.exp`` / ``math.log`` on scalars.

Both run in double precision.  They exist to be diffed against the tape
kernels, so nothing here may import the tensor-core ops; ``Tensor4`` is
used only as a data container at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import LossBreakdown, LossConfig, StageSpec
from .tensor import Tensor4


@dataclass(frozen=True)
class FdConfig:
    """Central finite differences in double precision."""

    step: float = 1e-6

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("finite-difference step must be positive")


def fd_gradient(f, x, cfg: FdConfig = FdConfig()) -> np.ndarray:
    """(f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps), one coordinate at a time.

    ``x`` may be a Tensor4 or a numpy array; ``f`` receives a float64
    array of x's shape and must return a finite scalar.
    """
    base = x.data if isinstance(x, Tensor4) else np.asarray(x)
    work = base.astype(np.float64).copy()
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    eps = cfg.step
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(work))
        flat[i] = orig - eps
        fm = float(f(work))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}: f+={fp}, f-={fm}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Largest per-coordinate relative error between two gradients.

    The denominator is floored at 1% of the dominant gradient magnitude so
    coordinates with near-zero true gradient do not amplify the roundoff
    noise floor of the finite differences.
    """
    a = np.asarray(reference, dtype=np.float64).ravel()
    b = np.asarray(candidate, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    gmax = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)),
                       max(0.01 * gmax, 1e-12))
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


# -- naive loss recomputation --------------------------------------------------


def _softmax_ce(scores: list[float], label: int) -> float:
    denom = sum(math.exp(v) for v in scores)
    return -math.log(math.exp(scores[label]) / denom)


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _group_scores(F: np.ndarray, b: int, spec: StageSpec,
                  masks: np.ndarray) -> list[float]:
    _, _, H, W = F.shape
    xi = spec.channels_per_class
    scores = []
    for i in range(spec.num_classes):
        acc = 0.0
        for j in range(H):
            for k in range(W):
                best = -math.inf
                for m in range(xi):
                    v = float(masks[i, m]) * float(F[b, i * xi + m, j, k])
                    if v > best:
                        best = v
                acc += best
        scores.append(acc / (H * W))
    return scores


def reference_discriminality(F: np.ndarray, y: np.ndarray, spec: StageSpec,
                             masks: np.ndarray) -> float:
    total = 0.0
    for b in range(F.shape[0]):
        total += _softmax_ce(_group_scores(F, b, spec, masks), int(y[b]))
    return total / F.shape[0]


def reference_diversity(F: np.ndarray, spec: StageSpec) -> float:
    n, _, H, W = F.shape
    xi = spec.channels_per_class
    total = 0.0
    for b in range(n):
        for i in range(spec.num_classes):
            # per-channel softmax over positions, then positionwise max
            sm = []
            for m in range(xi):
                ch = i * xi + m
                denom = 0.0
                for j in range(H):
                    for k in range(W):
                        denom += math.exp(float(F[b, ch, j, k]))
                sm.append([[math.exp(float(F[b, ch, j, k])) / denom
                            for k in range(W)] for j in range(H)])
            h_val = 0.0
            for j in range(H):
                for k in range(W):
                    h_val += max(sm[m][j][k] for m in range(xi))
            total += h_val
    return total / (n * spec.num_classes)


def reference_upsample(F: np.ndarray, method: str, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel interpolation with half-pixel centers and edge clamping."""
    n, c, in_h, in_w = F.shape
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for oy in range(out_h):
                sy = (oy + 0.5) * (in_h / out_h) - 0.5
                for ox in range(out_w):
                    sx = (ox + 0.5) * (in_w / out_w) - 0.5
                    out[b, ch, oy, ox] = _interp_pixel(F[b, ch], sy, sx, method)
    return out


def _interp_pixel(plane: np.ndarray, sy: float, sx: float, method: str) -> float:
    in_h, in_w = plane.shape

    def at(j, k):
        return float(plane[min(max(j, 0), in_h - 1), min(max(k, 0), in_w - 1)])

    if method == "nearest":
        return at(math.floor(sy + 0.5), math.floor(sx + 0.5))
    if method == "bilinear":
        j0, k0 = math.floor(sy), math.floor(sx)
        fy, fx = sy - j0, sx - k0
        return ((1 - fy) * ((1 - fx) * at(j0, k0) + fx * at(j0, k0 + 1))
                + fy * ((1 - fx) * at(j0 + 1, k0) + fx * at(j0 + 1, k0 + 1)))
    if method == "bicubic":
        j0, k0 = math.floor(sy), math.floor(sx)
        fy, fx = sy - j0, sx - k0
        total = 0.0
        for dj in (-1, 0, 1, 2):
            wy = _keys(fy - dj)
            for dk in (-1, 0, 1, 2):
                total += wy * _keys(fx - dk) * at(j0 + dj, k0 + dk)
        return total
    raise ValueError(f"unknown method {method!r}")


def _keys(d: float) -> float:
    d = abs(d)
    if d <= 1.0:
        return (1.5 * d - 2.5) * d * d + 1.0
    if d < 2.0:
        return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0
    return 0.0


def reference_attention(F_l: np.ndarray, F_h: np.ndarray, repeat: int,
                        method: str) -> np.ndarray:
    n, c_l, H, W = F_l.shape
    up = reference_upsample(F_h, method, H, W)
    out = np.zeros_like(F_l, dtype=np.float64)
    for b in range(n):
        for ch in range(c_l):
            src = ch // repeat
            for j in range(H):
                for k in range(W):
                    out[b, ch, j, k] = F_l[b, ch, j, k] * _sigmoid(float(up[b, src, j, k]))
    return out


def reference_losses(logits: np.ndarray, F_h: np.ndarray, F_l: np.ndarray,
                     y: np.ndarray, spec_h: StageSpec, spec_l: StageSpec,
                     cfg: LossConfig, masks_h: np.ndarray,
                     masks_l: np.ndarray) -> LossBreakdown:
    """Loop re-derivation of every component; masks must be supplied."""
    logits = np.asarray(logits, dtype=np.float64)
    F_h = np.asarray(F_h, dtype=np.float64)
    F_l = np.asarray(F_l, dtype=np.float64)
    n = logits.shape[0]

    ce = 0.0
    for b in range(n):
        ce += _softmax_ce([float(v) for v in logits[b].reshape(-1)], int(y[b]))
    ce /= n

    repeat = spec_l.channels_per_class // spec_h.channels_per_class
    gated = reference_attention(F_l, F_h, repeat, cfg.upsample_method)

    dis_h = reference_discriminality(F_h, y, spec_h, masks_h)
    div_h = reference_diversity(F_h, spec_h)
    dis_l = reference_discriminality(gated, y, spec_l, masks_l)
    div_l = reference_diversity(gated, spec_l)
    mc_h = dis_h - cfg.lam * div_h
    mc_l = dis_l - cfg.lam * div_l
    tdsa = mc_h + mc_l
    return LossBreakdown(
        ce=ce, dis_high=dis_h, div_high=div_h, mc_high=mc_h,
        dis_mid=dis_l, div_mid=div_l, mc_mid=mc_l,
        tdsa=tdsa, total=ce + cfg.mu * tdsa,
    )
