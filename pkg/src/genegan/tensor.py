"""Dense tensors with a reverse-mode differentiation tape.

Operations record onto the innermost active :class:`Tape`.  Outside of a tape
block nothing is recorded, which is how inference runs.

    >>> from genegan.tensor import Tensor, Tape, scale, sum as tsum
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(scale(x, 2.0))
    >>> grads = tape.backward(loss)
    >>> grads[x]
    array([2., 2.])
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "TapeError", "ShapeError", "RunningStats",
    "add", "sub", "mul", "scale", "neg", "abs", "sum", "mean", "l1",
    "sigmoid", "log", "log_sigmoid", "leaky_relu",
    "conv2d", "conv2d_transpose", "add_channel_bias", "batch_norm",
    "concat", "split", "concat_channels", "split_channels",
    "reshape", "global_avg_pool", "linear", "backward", "record_kinks",
]

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Finite-value assertion after every op; enable with GENEGAN_DEBUG=1.
DEBUG = os.environ.get("GENEGAN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An ndarray plus gradient bookkeeping.

    ``data`` is always a C-contiguous float32 or float64 array.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("kind", "inputs", "needs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        # requires_grad is snapshotted at record time so freezing is honoured
        self.needs = tuple(isinstance(t, Tensor) and t.requires_grad for t in inputs)
        self.output = output
        self.vjp = vjp


_active: list["Tape"] = []


class Tape:
    """Ordered record of operations, consumed by a single :meth:`backward`.

    A tape may only be differentiated once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def _record(self, kind, inputs, output, vjp):
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been differentiated")
        output._tape = self
        self.nodes.append(_Node(kind, inputs, output, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(t) for every leaf tensor with ``requires_grad``.

        Returns a map from leaf tensor to its gradient; the same arrays are
        also added into each leaf's ``.grad``.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already differentiated; call reset() before another backward")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, need, gi in zip(node.inputs, node.needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._tape is not self:
                    leaves[key] = t

        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads[key]
            out[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
        return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate ``loss`` on the tape that produced it."""
    if loss._tape is None:
        raise TapeError("loss has no tape attached (was it computed inside a Tape block?)")
    return loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing

_kink_log: list[list[np.ndarray]] = []


@contextmanager
def record_kinks():
    """Collect the inputs of every non-smooth op (leaky_relu, abs) run inside.

    Used by the finite-difference oracle to spot parameters whose
    perturbation crosses a kink.
    """
    log: list[np.ndarray] = []
    _kink_log.append(log)
    try:
        yield log
    finally:
        _kink_log.remove(log)


def _note_kink(x: np.ndarray) -> None:
    for log in _kink_log:
        log.append(x.copy())


def _make(kind: str, data: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{kind} produced non-finite values")
    needs = bool(_active) and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _active[-1]._record(kind, tuple(inputs), out, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make("add", a.data + np.asarray(b, a.dtype), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make("sub", a.data - np.asarray(b, a.dtype), (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if _kink_log:
        _note_kink(a.data)
    sgn = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape, dt = a.shape, a.dtype
    return _make("sum", np.asarray(a.data.sum(), dt), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.data.size
    return _make("mean", np.asarray(a.data.mean(), dt), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dt),))


def l1(a: Tensor) -> Tensor:
    """Mean absolute value."""
    return mean(abs(a))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value; use log_sigmoid for probabilities from logits")
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x) without overflow."""
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(-x)
    return _make("log_sigmoid", y, (a,), lambda g: (g * s,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if _kink_log:
        _note_kink(a.data)
    x = a.data
    slope = np.where(x > 0, 1.0, alpha).astype(x.dtype)
    return _make("leaky_relu", x * slope, (a,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> tuple[Tensor, ...]:
    if any(s <= 0 for s in sizes) or np.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"cannot split axis {axis} of shape {a.shape} into {list(sizes)}")
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        idx = tuple(idx)
        shape, dt = a.shape, a.dtype

        def vjp(g, idx=idx):
            full = np.zeros(shape, dtype=dt)
            full[idx] = g
            return (full,)

        outs.append(_make("split", np.ascontiguousarray(a.data[idx]), (a,), vjp))
        start += s
    return tuple(outs)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def split_channels(x: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Split NCHW ``x`` into its first ``k`` channels and the rest."""
    if x.ndim != 4 or not 0 < k < x.shape[1]:
        raise ShapeError(f"split_channels: need 0 < k < C, got k={k} for shape {x.shape}")
    return split(x, [k, x.shape[1] - k], axis=1)


def global_avg_pool(a: Tensor) -> Tensor:
    """NCHW -> NC mean over spatial positions."""
    n, c, h, w = a.shape
    dt = a.dtype

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(dt),)

    return _make("global_avg_pool", a.data.mean(axis=(2, 3)), (a,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias, with x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _make("linear", xd @ wd.T + bias.data, (x, weight, bias),
                 lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int, transpose: bool):
    op = "conv2d_transpose" if transpose else "conv2d"
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: expected NCHW input and square 4-D kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0 if transpose else 1]:
        raise ShapeError(f"{op}: input channels {x.shape[1]} do not match weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"{op}: invalid stride={stride} padding={padding}")


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n = x.shape[0]
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols, ho, wo


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input (equivalently, conv2d_transpose forward).

    Columns are produced in (kh, kw, C, N, Ho, Wo) order so that each kernel
    offset scatters one contiguous slab.
    """
    o, c, k, _ = w.shape
    n, _, ho, wo = g.shape
    _, _, h, wd = in_shape
    gT = g.transpose(1, 0, 2, 3).reshape(o, -1)
    wr = w.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    cols = (wr @ gT).reshape(k, k, c, n, ho, wo)
    out = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[i, j]
    out = out[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIHW ``weight`` (zero padding)."""
    _check_conv(x, weight, stride, padding, transpose=False)
    k = weight.shape[2]
    ho = _conv_out(x.shape[2], k, stride, padding)
    wo = _conv_out(x.shape[3], k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}, kernel {k}")
    out, cols, ho, wo = _conv_fwd(x.data, weight.data, stride, padding)
    wd, in_shape = weight.data, x.shape
    o = wd.shape[0]

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wd.shape)
        return _conv_input_grad(g, wd, in_shape, stride, padding), gw

    return _make("conv2d", np.ascontiguousarray(out), (x, weight), vjp)


def conv2d_transpose(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same weight.

    ``weight`` has shape (C_in, C_out, k, k): it is the OIHW kernel of the
    convolution this operation transposes.
    """
    _check_conv(x, weight, stride, padding, transpose=True)
    n, _, h, w = x.shape
    k = weight.shape[2]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose: non-positive output size {ho}x{wo} for input {x.shape}")
    out_shape = (n, weight.shape[1], ho, wo)
    wd = weight.data
    out = _conv_input_grad(x.data, wd, out_shape, stride, padding)
    xd = x.data
    c_in = wd.shape[0]

    def vjp(g):
        gx, cols, _, _ = _conv_fwd(g, wd, stride, padding)
        x2 = xd.transpose(0, 2, 3, 1).reshape(-1, c_in)
        gw = (x2.T @ cols).reshape(wd.shape)
        return np.ascontiguousarray(gx), gw

    return _make("conv2d_transpose", out, (x, weight), vjp)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match channels of {x.shape}")
    return _make("add_channel_bias", x.data + bias.data[None, :, None, None], (x, bias),
                 lambda g: (g, g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# batch normalization

class RunningStats:
    """Per-channel running mean/variance used by :func:`batch_norm` in eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of an NCHW (or NC) tensor.

    In training mode the batch statistics are used and the running stats are
    updated as ``running = momentum * running + (1 - momentum) * batch``.
    The running variance tracks the biased batch variance.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    dt = xd.dtype
    if training:
        m = xd.size // xd.shape[1]
        if xd.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs at least 2 samples")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mu
        stats.var[...] = momentum * stats.var + (1 - momentum) * var
    else:
        mu, var = stats.mean.astype(dt), stats.var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data
    out = xhat * gd.reshape(bshape) + beta.data.reshape(bshape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gh = g * gd.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / m) * (
                m * gh - gh.sum(axis=axes).reshape(bshape)
                - xhat * (gh * xhat).sum(axis=axes).reshape(bshape))
        else:
            dx = gh * inv.reshape(bshape)
        return dx.astype(dt), dgamma, dbeta

    return _make("batch_norm", out.astype(dt), (x, gamma, beta), vjp)
