"""Minimal reverse-mode autodiff on numpy arrays.

Provides exactly the primitives the Conv-4 backbone and the prototypical
losses need: conv2d (3x3, stride 1, pad 1), batchnorm2d, relu, 2x2
maxpool, flatten, linear, pairwise squared distances, log-softmax and a
handful of reductions. Every primitive records a backward closure on the
active ComputationTape; ``backward`` replays the tape in exact reverse
execution order, so gradient accumulation order is deterministic.

Values are float32 by default. All primitives are dtype-generic; the
finite-difference test harness runs them in float64 where float32
round-off would swamp the h^2 truncation error of central differences.

Tensors are treated as immutable values once created. A tape belongs to
one training step on one thread; independent tapes may run concurrently.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "ComputationTape",
    "backward",
    "finite_diff_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tsum",
    "tmean",
    "reshape",
    "rows",
    "matmul",
    "relu",
    "conv2d",
    "batchnorm2d",
    "RunningStats",
    "maxpool2x2",
    "flatten",
    "linear",
    "pairwise_sq_dist",
    "log_softmax",
    "take_per_row",
]


class Tensor:
    """n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{nm})"


class ComputationTape:
    """Ordered record of executed primitives, replayable backward once."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _stack().pop()
        assert top is self
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self._entries.append((out, inputs, backward_fn))


_local = threading.local()


def _stack() -> list[ComputationTape]:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = []
        _local.tapes = st
    return st


def _active_tape() -> ComputationTape | None:
    st = _stack()
    return st[-1] if st else None


def _make(data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a primitive's result, recording it if gradients may flow."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: ComputationTape):
    """Populate grad buffers for everything reachable from ``loss``.

    The loss must be a scalar produced through ``tape``; a tape can be
    consumed only once per forward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if tape.consumed:
        raise ContractError("tape already consumed; run a new forward pass before backward")
    tape.consumed = True
    for out, inputs, _ in tape._entries:
        out.grad = None
        for t in inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape._entries):
        if out.grad is None:
            continue
        backward_fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * np.asarray(c, dtype=a.dtype), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(a.data.sum(dtype=a.dtype).reshape(()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True))

    return _make((a.data.sum(dtype=a.dtype) / n).reshape(()).astype(a.dtype), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"rows: slice [{start}:{stop}] out of range for axis 0 of size {a.shape[0]}")

    def bwd(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[start:stop] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(a.data[start:stop]), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, np.asarray(0, dtype=a.dtype)), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner axes differ ({a.shape[1]} vs {b.shape[0]})")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def _im2col3x3(xp: np.ndarray) -> np.ndarray:
    """[B,C,H+2,W+2] (already padded) -> [B*H*W, C*9] patch matrix."""
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * 9)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero-padding 1 (shape-preserving)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [B,C,H,W], got rank {x.ndim}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be [F,C,3,3], got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: channel axis mismatch, input has {x.shape[1]} channels "
            f"but kernel expects {kernel.shape[1]}"
        )
    nf = kernel.shape[0]
    if bias.shape != (nf,):
        raise ShapeError(f"conv2d: bias axis must have size {nf}, got {tuple(bias.shape)}")
    bsz, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3x3(xp)
    kmat = kernel.data.reshape(nf, -1)
    out = (cols @ kmat.T + bias.data).reshape(bsz, h, w, nf).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, nf)
        if kernel.requires_grad:
            _accum(kernel, (gmat.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            _accum(bias, gmat.sum(axis=0))
        if x.requires_grad:
            # dx is a full correlation of g with the flipped kernel.
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
            gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = _im2col3x3(gp)
            dx = (gcols @ kflip.T).reshape(bsz, h, w, x.shape[1]).transpose(0, 3, 1, 2)
            _accum(x, np.ascontiguousarray(dx))

    return _make(np.ascontiguousarray(out), (x, kernel, bias), bwd)


class RunningStats:
    """Per-channel running mean/variance for batchnorm eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray):
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var).astype(self.var.dtype)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean), self.momentum, dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, mode: str) -> Tensor:
    """Channel-wise batch normalization over [B,C,H,W].

    Train mode normalizes by batch statistics (population variance,
    epsilon 1e-5) and updates ``stats`` with momentum 0.1; eval mode
    normalizes by the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be [B,C,H,W], got rank {x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        if n < 2:
            raise ContractError(
                "batchnorm2d: train mode needs at least 2 values per channel "
                f"(got B*H*W = {n}); variance is degenerate"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.update(mean, var)
    else:
        mean = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
            if mode == "train":
                gm = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gxm = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                _accum(x, gi * (g - gm - xhat * gxm))
            else:
                _accum(x, gi * g)

    return _make(out.astype(x.dtype), (x, gamma, beta), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are discarded."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: input must be [B,C,H,W], got rank {x.ndim}")
    bsz, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2x2: spatial extent {h}x{w} too small to pool")
    crop = x.data[:, :, : 2 * ho, : 2 * wo]
    win = crop.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, 4)
    # argmax picks the first maximum, giving a deterministic tie-break
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((bsz, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gfull = np.zeros(x.shape, dtype=x.dtype)
        gfull[:, :, : 2 * ho, : 2 * wo] = (
            gw.reshape(bsz, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * ho, 2 * wo)
        )
        _accum(x, gfull)

    return _make(np.ascontiguousarray(out), (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)]"""
    return reshape(x, (x.shape[0], -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [B,D] @ weight[F,D].T + bias[F]"""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: feature axes differ ({x.shape[1]} vs {weight.shape[1]})")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias axis must have size {weight.shape[0]}")

    def bwd(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        _accum(bias, g.sum(axis=0))

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), bwd)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance matrix: out[i,j] = sum_d (a[i,d]-b[j,d])^2."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("pairwise_sq_dist expects 2-D operands")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: feature axes differ ({a.shape[1]} vs {b.shape[1]})")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijd,ijd->ij", diff, diff)

    def bwd(g):
        if a.requires_grad:
            _accum(a, 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data))
        if b.requires_grad:
            _accum(b, 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))

    return _make(out.astype(a.dtype), (a, b), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax with max-subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError("log_softmax expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        _accum(x, g - sm * g.sum(axis=1, keepdims=True))

    return _make(out.astype(x.dtype), (x,), bwd)


def take_per_row(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = x[i, index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("take_per_row: need x [B,C] and index [B]")
    ar = np.arange(x.shape[0])

    def bwd(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[ar, index] = g
        _accum(x, full)

    return _make(x.data[ar, index].copy(), (x,), bwd)


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_diff_gradient(fn, at: Tensor, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of a scalar-valued fn at ``at``.

    ``indices`` optionally restricts evaluation to a subset of flat
    coordinates (the rest of the returned array stays 0), which keeps
    whole-network checks affordable.
    """
    if h <= 0:
        raise ContractError("finite_diff_gradient: h must be positive")
    base = at.data if isinstance(at, Tensor) else np.asarray(at)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = _scalar(fn(Tensor(bumped.reshape(base.shape), dtype=base.dtype)))
        bumped[i] = flat[i] - h
        fm = _scalar(fn(Tensor(bumped.reshape(base.shape), dtype=base.dtype)))
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        if v.size != 1:
            raise ContractError("finite_diff_gradient: fn must return a scalar")
        return float(v.data)
    return float(v)
