"""Dense 4-D tensors with a reverse-mode autodiff tape.

Everything is batched feature maps in (batch, channel, height, width)
layout, stored row-major in a numpy array.  A ``Tape`` records operations
in creation order (which is automatically a topological order); calling
``backward`` on a scalar node walks the list once in reverse, accumulating
gradients additively across fan-out.

Precision convention: training runs in float32, all oracle and
finite-difference paths run in float64.  Binary operations require both
operands to share a dtype.

Max reductions route the full gradient to the first maximal element in
scan order (lowest index); gradient checks must sample inputs away from
ties.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

MAGIC_T4 = b"T4\x00\x00"

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated (labels, scalar roots, ...)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf detected where finite values are required."""


def _as4d(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected 4-D (n,c,h,w) data, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor4:
    """A (n, c, h, w) tensor, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False,
                 tape: "Tape | None" = None, node_id: int | None = None):
        self.data = _as4d(data)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor holds NaN or Inf entries")
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.node_id = node_id

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor4(shape={self.shape}, dtype={self.dtype.name}{tag})"

    @staticmethod
    def const(data, dtype=None) -> "Tensor4":
        """A tensor carrying no gradient and living on no tape."""
        return Tensor4(_as4d(data, dtype))


class _Node:
    __slots__ = ("parents", "grad_fn")

    def __init__(self, parents: tuple[int, ...], grad_fn: GradFn | None):
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def leaf(self, data, requires_grad: bool = True, dtype=None) -> Tensor4:
        t = Tensor4(_as4d(data, dtype), requires_grad=requires_grad, tape=self)
        t.node_id = len(self.nodes)
        self.nodes.append(_Node((), None))
        return t

    def _record(self, data: np.ndarray, parents: tuple[int, ...], grad_fn: GradFn) -> Tensor4:
        t = Tensor4(data, requires_grad=True, tape=self)
        t.node_id = len(self.nodes)
        self.nodes.append(_Node(parents, grad_fn))
        return t

    def backward(self, root: Tensor4) -> dict[int, np.ndarray]:
        """Gradient of a scalar root w.r.t. every recorded node it reaches.

        Returns the tape's gradient map (node id -> array).  Each node is
        visited exactly once; fan-out accumulates additively.
        """
        if root.tape is not self or root.node_id is None:
            raise ContractError("root tensor does not live on this tape")
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {
            root.node_id: np.ones_like(root.data)
        }
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.grad_fn is None:
                continue
            parent_grads = node.grad_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                if acc is None:
                    grads[pid] = pg
                else:
                    # out-of-place: grad_fns may hand the same array to
                    # several parents, so never mutate a stored gradient
                    grads[pid] = acc + pg
        self.gradients = grads
        return grads

    def grad(self, t: Tensor4) -> np.ndarray:
        """Gradient of the last backward() root w.r.t. ``t`` (zeros if unreached)."""
        if t.tape is not self or t.node_id is None:
            raise ContractError("tensor does not live on this tape")
        g = self.gradients.get(t.node_id)
        if g is None:
            return np.zeros_like(t.data)
        return g


# -- op plumbing ------------------------------------------------------------


def _result_tape(inputs: Sequence[Tensor4]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        return None
    if not any(t.requires_grad for t in inputs):
        return None
    return tape


def record(data: np.ndarray, inputs: Sequence[Tensor4], grad_fn: GradFn) -> Tensor4:
    """Register a differentiable op result; constant-folds when untaped.

    ``grad_fn`` maps the output gradient to one gradient (or None) per
    input, in order.  Exposed so other modules can define primitives with
    their own backward rules.
    """
    tape = _result_tape(inputs)
    if tape is None:
        return Tensor4(data)
    parents = tuple(t.node_id if t.tape is tape else -1 for t in inputs)
    if any(p == -1 for p in parents):
        # inputs without a node (constants) get their gradient dropped
        keep = [i for i, p in enumerate(parents) if p != -1]

        def filtered(g, _keep=keep, _fn=grad_fn):
            full = _fn(g)
            return [full[i] for i in _keep]

        return tape._record(data, tuple(p for p in parents if p != -1), filtered)
    return tape._record(data, parents, grad_fn)


def _check_same_shape(a: Tensor4, b: Tensor4, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor4, b: Tensor4) -> Tensor4:
    """out = a * b elementwise; gradient flows to both operands."""
    _check_same_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


mul = elementwise_mul


def affine(x: Tensor4, scale: float, shift: float = 0.0) -> Tensor4:
    """out = scale * x + shift with scalar coefficients."""
    s = x.dtype.type(scale)
    return record(s * x.data + x.dtype.type(shift), (x,), lambda g: (s * g,))


def exp(x: Tensor4) -> Tensor4:
    out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise NonFiniteError("exp overflowed to Inf")
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor4) -> Tensor4:
    if (x.data <= 0).any():
        raise ContractError("log requires strictly positive input")
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor4) -> Tensor4:
    """Logistic function, computed stably; outputs lie in the open (0,1)."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, x.dtype.type(0))
    return record(out, (x,), lambda g: (g * (out > 0),))


def stop_gradient(x: Tensor4) -> Tensor4:
    """Identity forward; blocks gradient flow into x."""
    return Tensor4(x.data.copy())


# -- per-channel broadcasts ---------------------------------------------------


def _check_channel_vec(x: Tensor4, v: Tensor4, op: str):
    if v.shape != (1, x.c, 1, 1):
        raise ShapeError(f"{op}: expected per-channel (1,{x.c},1,1) operand, got {v.shape}")
    if x.dtype != v.dtype:
        raise ContractError(f"{op}: dtype mismatch {x.dtype} vs {v.dtype}")


def mul_channel(x: Tensor4, v: Tensor4) -> Tensor4:
    """Broadcast a per-channel scalar (e.g. a 0-1 mask) over batch and h*w."""
    _check_channel_vec(x, v, "mul_channel")
    xd, vd = x.data, v.data
    return record(xd * vd, (x, v),
                  lambda g: (g * vd, (g * xd).sum(axis=(0, 2, 3), keepdims=True)))


def add_channel(x: Tensor4, v: Tensor4) -> Tensor4:
    _check_channel_vec(x, v, "add_channel")
    return record(x.data + v.data, (x, v),
                  lambda g: (g, g.sum(axis=(0, 2, 3), keepdims=True)))


# -- spatial / channel reductions --------------------------------------------


def spatial_softmax(x: Tensor4) -> Tensor4:
    """Softmax over the h*w positions, independently per batch and channel.

    Stabilized by per-channel max subtraction; per-channel spatial sums
    are 1 and the output is invariant to per-channel additive shifts.
    """
    xd = x.data
    shifted = xd - xd.max(axis=(2, 3), keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=(2, 3), keepdims=True)
        return (out * (g - dot),)

    return record(out, (x,), grad_fn)


def gap(x: Tensor4) -> Tensor4:
    """Global average pool over h*w, keeping (n,c,1,1)."""
    hw = x.h * x.w
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = x.dtype.type(1.0 / hw)
    shape = x.shape
    return record(out, (x,),
                  lambda g: (np.broadcast_to(g * scale, shape).copy(),))


def spatial_sum(x: Tensor4) -> Tensor4:
    """Sum over h*w, keeping (n,c,1,1)."""
    out = x.data.sum(axis=(2, 3), keepdims=True)
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_all(x: Tensor4) -> Tensor4:
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor4) -> Tensor4:
    size = x.data.size
    out = x.data.mean(dtype=x.dtype).reshape(1, 1, 1, 1)
    scale = x.dtype.type(1.0 / size)
    shape = x.shape
    return record(out, (x,),
                  lambda g: (np.broadcast_to(g * scale, shape).copy(),))


def channel_group_max(x: Tensor4, group_size: int) -> Tensor4:
    """Positionwise max over each contiguous block of ``group_size`` channels.

    (n, G*group_size, h, w) -> (n, G, h, w).  Ties send the whole gradient
    to the first maximal channel in the group.
    """
    if group_size < 1 or x.c % group_size != 0:
        raise ShapeError(f"channel count {x.c} not divisible into groups of {group_size}")
    n, c, h, w = x.shape
    groups = c // group_size
    xg = x.data.reshape(n, groups, group_size, h, w)
    idx = xg.argmax(axis=2)
    out = np.take_along_axis(xg, idx[:, :, None], axis=2)[:, :, 0]

    def grad_fn(g):
        gx = np.zeros((n, groups, group_size, h, w), dtype=g.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(n, c, h, w),)

    return record(out, (x,), grad_fn)


def channel_slice(x: Tensor4, c0: int, c1: int) -> Tensor4:
    """Channels [c0, c1); backward scatters into the slice position."""
    if not (0 <= c0 < c1 <= x.c):
        raise ShapeError(f"channel slice [{c0},{c1}) out of range for c={x.c}")
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, c0:c1] = g
        return (gx,)

    return record(x.data[:, c0:c1].copy(), (x,), grad_fn)


def concat_channels(parts: Sequence[Tensor4]) -> Tensor4:
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts:
        if (p.n, p.h, p.w) != (n, h, w):
            raise ShapeError("concat_channels: batch or spatial dims differ")
    sizes = [p.c for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return [g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes))]

    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), grad_fn)


# -- classification head ------------------------------------------------------


def softmax_cross_entropy(logits: Tensor4, labels: np.ndarray) -> Tensor4:
    """Batch-mean cross entropy of softmax(logits) against integer labels.

    logits: (n, S, 1, 1); labels: (n,) ints in [0, S).
    """
    if logits.h != 1 or logits.w != 1:
        raise ShapeError(f"logits must be (n,S,1,1), got {logits.shape}")
    y = np.asarray(labels)
    n, s = logits.n, logits.c
    if y.shape != (n,):
        raise ContractError(f"labels must have shape ({n},), got {y.shape}")
    if y.min() < 0 or y.max() >= s:
        raise ContractError(f"label out of range [0,{s})")
    z = logits.data.reshape(n, s)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    loss = -logp[np.arange(n), y].mean(dtype=z.dtype)

    def grad_fn(g):
        p = ez / denom
        p[np.arange(n), y] -= 1
        return ((float(g.reshape(())) / n) * p.reshape(n, s, 1, 1),)

    return record(np.asarray(loss).reshape(1, 1, 1, 1), (logits,), grad_fn)


# -- convolution / pooling / normalization ------------------------------------


def conv2d(x: Tensor4, w: Tensor4, pad: int = 0) -> Tensor4:
    """2-D correlation, stride 1: (n,ci,H,W) * (co,ci,kh,kw) -> (n,co,H',W').

    Internally stages data channels-last: im2col rows then copy contiguous
    kw*ci runs instead of per-pixel fragments, and the matmul result is
    already in channels-last order, which keeps the CPU path memory-bound
    work near one pass per tensor.
    """
    n, ci, hh, ww = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv2d: input channels {ci} != kernel channels {ci_w}")
    if x.dtype != w.dtype:
        raise ContractError("conv2d: dtype mismatch")
    oh = hh + 2 * pad - kh + 1
    ow = ww + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col_cl(xh, kh, kw)                     # (n*oh*ow, kh*kw*ci)
    w2 = np.ascontiguousarray(
        w.data.transpose(2, 3, 1, 0).reshape(kh * kw * ci, co))
    out = np.ascontiguousarray(
        (cols @ w2).reshape(n, oh, ow, co).transpose(0, 3, 1, 2))

    wd = w.data
    need_gx = x.requires_grad

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        grad_w = np.ascontiguousarray(
            (cols.T @ g2).reshape(kh, kw, ci, co).transpose(3, 2, 0, 1))
        if not need_gx:
            return (None, grad_w)
        # full correlation of the output grad with the flipped kernel
        gp = np.pad(g2.reshape(n, oh, ow, co),
                    ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        wflip = np.ascontiguousarray(
            wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * co, ci))
        gcols = _im2col_cl(gp, kh, kw)
        gx_full = (gcols @ wflip).reshape(n, hh + 2 * pad, ww + 2 * pad, ci)
        if pad:
            gx_full = gx_full[:, pad:pad + hh, pad:pad + ww, :]
        return (np.ascontiguousarray(gx_full.transpose(0, 3, 1, 2)), grad_w)

    return record(out, (x, w), grad_fn)


def _im2col_cl(xh: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Channels-last im2col: (n,H,W,c) -> (n*oh*ow, kh*kw*c) patch rows."""
    n, _, _, c = xh.shape
    win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
    oh, ow = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def maxpool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling, stride 2; h and w must be even.

    Within each window, ties route the gradient to the first maximal
    position in row-major scan order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    quads = (xd[:, :, ::2, ::2], xd[:, :, ::2, 1::2],
             xd[:, :, 1::2, ::2], xd[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))

    def grad_fn(g):
        gx = np.zeros_like(xd)
        slots = (gx[:, :, ::2, ::2], gx[:, :, ::2, 1::2],
                 gx[:, :, 1::2, ::2], gx[:, :, 1::2, 1::2])
        taken = np.zeros(out.shape, dtype=bool)
        for q, slot in zip(quads, slots):
            hit = (q == out) & ~taken
            slot[...] = g * hit
            taken |= hit
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), grad_fn)


def batchnorm(x: Tensor4, gamma: Tensor4, beta: Tensor4, training: bool,
              running_mean: np.ndarray | None = None,
              running_var: np.ndarray | None = None,
              eps: float = 1e-5) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Per-channel batch normalization.

    Training mode normalizes by batch statistics (biased variance) and
    returns them so the caller can update running averages; forward never
    mutates state.  Eval mode normalizes by the supplied running stats.
    """
    _check_channel_vec(x, gamma, "batchnorm")
    _check_channel_vec(x, beta, "batchnorm")
    xd = x.data
    dt = x.dtype.type
    if training:
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = np.maximum(
            np.mean(np.square(xd), axis=(0, 2, 3), keepdims=True)
            - np.square(mean), dt(0))
    else:
        if running_mean is None or running_var is None:
            raise ContractError("batchnorm eval mode needs running statistics")
        mean = np.asarray(running_mean, dtype=xd.dtype).reshape(1, -1, 1, 1)
        var = np.asarray(running_var, dtype=xd.dtype).reshape(1, -1, 1, 1)
    inv_std = 1.0 / np.sqrt(var + dt(eps))
    # out = gamma * (x - mean) * inv_std + beta, folded to one scale/shift
    # pair per channel; xhat is rebuilt lazily in backward
    scale = gamma.data * inv_std
    out = xd * scale + (beta.data - mean * scale)
    gd = gamma.data

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def grad_fn(g):
            xhat = (xd - mean) * inv_std
            dg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            db = g.sum(axis=(0, 2, 3), keepdims=True)
            gx = (gd * inv_std) * (g - db / m - xhat * (dg / m))
            return (gx, dg, db)
    else:

        def grad_fn(g):
            xhat = (xd - mean) * inv_std
            dg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            db = g.sum(axis=(0, 2, 3), keepdims=True)
            return (g * gd * inv_std, dg, db)

    out_t = record(out, (x, gamma, beta), grad_fn)
    return out_t, mean.reshape(-1).copy(), var.reshape(-1).copy()


# -- serialization ------------------------------------------------------------


def save_tensor4(path, t: Tensor4) -> None:
    """Write the (magic, dims, little-endian float32 payload) wire format."""
    n, c, h, w = t.shape
    with open(path, "wb") as f:
        f.write(MAGIC_T4)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_tensor4(path) -> Tensor4:
    with open(path, "rb") as f:
        head = f.read(20)
        if len(head) != 20 or head[:4] != MAGIC_T4:
            raise ContractError(f"{path}: not a tensor dump (bad header)")
        dims = struct.unpack("<4I", head[4:])
        count = int(np.prod(dims))
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ContractError(f"{path}: truncated payload")
        extra = f.read(1)
        if extra:
            raise ContractError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Tensor4(arr)
