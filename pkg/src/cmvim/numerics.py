"""Dense tensors with reverse-mode differentiation.

Every differentiable op records a :class:`Node` on its output. A node names
its op; the backward rule is looked up in :data:`BACKWARD_RULES` at replay
time, so rules can be audited (and, in tests, perturbed) by name.

``backward`` linearises the reachable graph into a :class:`Tape` ordered by
execution sequence and replays it in reverse, visiting every node once.
"""
from __future__ import annotations

import builtins
import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "no_grad", "grad_enabled", "tensor",
    "BACKWARD_RULES", "register_op", "apply_op",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "sqrt", "power",
    "sigmoid", "silu", "softplus", "sum", "mean", "matmul", "transpose",
    "reshape", "concat", "split", "slice_axis", "gather", "pad", "flip",
    "softmax", "log_softmax", "layer_norm", "causal_conv1d", "l2_normalize",
    "DimensionError", "ContractError",
]

FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


_state = threading.local()
_seq = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "ctx", "seq")

    def __init__(self, op: str, inputs: tuple, ctx):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# registry and tape
# ---------------------------------------------------------------------------

BackwardRule = Callable[[object, tuple, np.ndarray], Sequence[np.ndarray | None]]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def register_op(name: str):
    def deco(rule: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = rule
        return rule
    return deco


def apply_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    """Wrap ``out_data`` as the output of ``op`` and record it if needed."""
    out = Tensor(out_data, dtype=out_data.dtype if out_data.dtype in FLOAT_DTYPES else None)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), ctx)
    return out


class Tape:
    """Execution-ordered record of the ops reachable from one output."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.entries = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[tuple[Tensor, Node]] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in seen:
                continue
            seen.add(id(t.node))
            entries.append((t, t.node))
            stack.extend(t.node.inputs)
        entries.sort(key=lambda e: e[1].seq)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [n.op for _, n in self.entries]

    def replay(self, out: Tensor, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed_grad}
        for t, node in reversed(self.entries):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[node.op](node.ctx, node.inputs, g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if gx.shape != x.shape:
                    raise DimensionError(
                        f"backward of {node.op!r} produced grad {gx.shape} for input {x.shape}")
                if x.node is None:
                    if x.grad is None:
                        x.grad = np.array(gx, dtype=x.dtype, copy=True)
                    else:
                        x.grad += gx
                else:
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else prev + gx
        if out.node is None and out.requires_grad:
            out.grad = seed_grad if out.grad is None else out.grad + seed_grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Leaf gradients accumulate across calls until reset with ``zero_grad``;
    the graph lives as long as ``loss`` does, so a second call adds the same
    gradient again.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("add", a.data + b.data, (a, b))


@register_op("add")
def _add_bw(ctx, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("sub", a.data - b.data, (a, b))


@register_op("sub")
def _sub_bw(ctx, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("mul", a.data * b.data, (a, b))


@register_op("mul")
def _mul_bw(ctx, inputs, g):
    a, b = inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("div", a.data / b.data, (a, b))


@register_op("div")
def _div_bw(ctx, inputs, g):
    a, b = inputs
    ga = g / b.data
    return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)


def neg(x: Tensor) -> Tensor:
    return apply_op("neg", -x.data, (x,))


@register_op("neg")
def _neg_bw(ctx, inputs, g):
    return (-g,)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    return apply_op("scale", x.data * x.dtype.type(c), (x,), c)


@register_op("scale")
def _scale_bw(c, inputs, g):
    return (g * g.dtype.type(c),)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op("exp", out, (x,), out)


@register_op("exp")
def _exp_bw(out, inputs, g):
    return (g * out,)


def log(x: Tensor) -> Tensor:
    return apply_op("log", np.log(x.data), (x,))


@register_op("log")
def _log_bw(ctx, inputs, g):
    return (g / inputs[0].data,)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return apply_op("sqrt", out, (x,), out)


@register_op("sqrt")
def _sqrt_bw(out, inputs, g):
    return (g * 0.5 / out,)


def power(x: Tensor, k: float) -> Tensor:
    """``x ** k`` for a constant exponent; ``x`` must be non-negative unless ``k`` is integral."""
    return apply_op("power", np.power(x.data, k), (x,), k)


@register_op("power")
def _power_bw(k, inputs, g):
    x = inputs[0].data
    return (g * (k * np.power(x, k - 1)),)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return apply_op("sigmoid", out, (x,), out)


@register_op("sigmoid")
def _sigmoid_bw(out, inputs, g):
    return (g * out * (1 - out),)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return apply_op("silu", x.data * s, (x,), s)


@register_op("silu")
def _silu_bw(s, inputs, g):
    x = inputs[0].data
    return (g * (s * (1 + x * (1 - s))),)


def softplus(x: Tensor) -> Tensor:
    return apply_op("softplus", np.logaddexp(0, x.data).astype(x.dtype), (x,))


@register_op("softplus")
def _softplus_bw(ctx, inputs, g):
    return (g * _sigmoid_np(inputs[0].data),)


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    return apply_op("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), (axes, keepdims))


@register_op("sum")
def _sum_bw(ctx, inputs, g):
    axes, keepdims = ctx
    x = inputs[0]
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return apply_op("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), (axes, keepdims, count))


@register_op("mean")
def _mean_bw(ctx, inputs, g):
    axes, keepdims, count = ctx
    x = inputs[0]
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / g.dtype.type(count), x.shape).copy(),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes of either side broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return apply_op("matmul", np.matmul(a.data, b.data), (a, b))


@register_op("matmul")
def _matmul_bw(ctx, inputs, g):
    a, b = inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    return apply_op("transpose", np.transpose(x.data, axes), (x,), axes)


@register_op("transpose")
def _transpose_bw(axes, inputs, g):
    return (np.transpose(g, np.argsort(axes)),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op("reshape", x.data.reshape(shape), (x,))


@register_op("reshape")
def _reshape_bw(ctx, inputs, g):
    return (g.reshape(inputs[0].shape),)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    return apply_op("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                    (axis, [x.shape[axis] for x in xs]))


@register_op("concat")
def _concat_bw(ctx, inputs, g):
    axis, sizes = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    return apply_op("slice", x.data[idx], (x,), idx)


@register_op("slice")
def _slice_bw(idx, inputs, g):
    out = np.zeros_like(inputs[0].data)
    out[idx] = g
    return (out,)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``.

    ``indices`` is either 1-D (same rows for every leading slice) or has the
    shape of ``x`` up to and including ``axis`` (per-batch selections, as with
    ``np.take_along_axis``).
    """
    axis = axis % x.ndim
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("gather indices must be integers")
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis {axis} of length {n}")
    idx = np.where(idx < 0, idx + n, idx)
    if idx.ndim == 1:
        out = np.take(x.data, idx, axis=axis)
        mode = "take"
    else:
        if idx.shape[:axis] != x.shape[:axis] or idx.ndim != axis + 1:
            raise DimensionError(f"batched gather indices {idx.shape} do not match {x.shape} at axis {axis}")
        full = idx.reshape(idx.shape + (1,) * (x.ndim - axis - 1))
        out = np.take_along_axis(x.data, full, axis=axis)
        mode = "along"
        idx = full
    return apply_op("gather", out, (x,), (mode, idx, axis))


@register_op("gather")
def _gather_bw(ctx, inputs, g):
    mode, idx, axis = ctx
    x = inputs[0]
    out = np.zeros_like(x.data)
    if mode == "take":
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
    else:
        full = np.broadcast_to(idx, g.shape)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = full
        np.add.at(out, tuple(grids), g)
    return (out,)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one ``(before, after)`` pair per axis."""
    widths = [tuple(w) for w in widths]
    return apply_op("pad", np.pad(x.data, widths), (x,), widths)


@register_op("pad")
def _pad_bw(widths, inputs, g):
    idx = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(widths))
    return (g[idx],)


def flip(x: Tensor, axis: int) -> Tensor:
    return apply_op("flip", np.flip(x.data, axis).copy(), (x,), axis)


@register_op("flip")
def _flip_bw(axis, inputs, g):
    return (np.flip(g, axis).copy(),)


# ---------------------------------------------------------------------------
# fused nonlinear blocks
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    out = _softmax_np(x.data, axis)
    return apply_op("softmax", out, (x,), (out, axis))


@register_op("softmax")
def _softmax_bw(ctx, inputs, g):
    out, axis = ctx
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return apply_op("log_softmax", out, (x,), (out, axis))


@register_op("log_softmax")
def _log_softmax_bw(ctx, inputs, g):
    out, axis = ctx
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} does not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    return apply_op("layer_norm", out.astype(x.dtype, copy=False), (x, gain, bias), (xhat, rstd))


@register_op("layer_norm")
def _layer_norm_bw(ctx, inputs, g):
    xhat, rstd = ctx
    x, gain, bias = inputs
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
    dbias = g.sum(axis=lead) if bias.requires_grad else None
    gx = g * gain.data
    dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``x`` is ``[..., L, C]``, ``weight`` is ``[C, K]``; output step ``t`` sees
    inputs ``t-K+1 .. t`` with zeros before the sequence start.
    """
    c, k = weight.shape
    if x.shape[-1] != c or bias.shape != (c,):
        raise DimensionError(f"conv weight {weight.shape} / bias {bias.shape} vs input {x.shape}")
    L = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += weight.data[:, j] * xp[..., j:j + L, :]
    return apply_op("causal_conv1d", out, (x, weight, bias), xp)


@register_op("causal_conv1d")
def _causal_conv1d_bw(xp, inputs, g):
    x, weight, bias = inputs
    c, k = weight.shape
    L = x.shape[-2]
    lead = tuple(range(g.ndim - 1))
    gxp = np.zeros_like(xp)
    dw = np.empty_like(weight.data)
    for j in range(k):
        gxp[..., j:j + L, :] += g * weight.data[:, j]
        dw[:, j] = (g * xp[..., j:j + L, :]).sum(axis=lead)
    return gxp[..., k - 1:, :], dw, g.sum(axis=lead)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm (composed from primitive ops)."""
    norm = sqrt(add(sum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def ensure_finite(arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    for name, arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in {name}")
