"""Dense tensors with tape-based reverse-mode differentiation.

Every op that touches a grad-tracked input appends its output to the
thread's current :class:`Tape`. :func:`backward` walks that tape in reverse
construction order once, then retires it; the next forward pass records onto
a fresh tape.

Broadcasting is deliberately narrow. Binary elementwise ops accept operands of
equal shape, a scalar operand, or an operand whose shape is a suffix of the
other's (a bias broadcast over leading batch dims). Anything else needs an
explicit :func:`expand`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
# Extended precision, used only as a finite-difference oracle for f64 gradients.
# Equals float64 on platforms without a wider long double.
_DTYPES["ext"] = np.longdouble
_FLOATS = tuple(set(_DTYPES.values()))
_default_dtype = np.float64
_debug_finite = False
_tape_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonScalarLossError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


def resolve_dtype(dtype) -> type:
    if dtype is None:
        return _default_dtype
    if isinstance(dtype, str):
        try:
            return _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(_DTYPES)}") from None
    dt = np.dtype(dtype).type
    if dt not in _FLOATS:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return dt


def dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    return "f32" if dt == np.float32 else "f64" if dt == np.float64 else "ext"


def oracle_dtype(dtype) -> type:
    """Next wider float type: f32 -> f64, f64 -> extended (where available)."""
    return np.float64 if np.dtype(dtype) == np.float32 else np.longdouble


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = resolve_dtype(dtype)


def get_default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise :class:`NonFiniteError`."""
    global _debug_finite
    _debug_finite = bool(enabled)


@contextlib.contextmanager
def debug_finite(enabled: bool = True):
    prev = _debug_finite
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(prev)


class Tape:
    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> Tape:
    """Drop whatever was recorded so far, e.g. after an abandoned forward pass."""
    if getattr(_local, "tape", None) is not None:
        _local.tape.consumed = True
    _local.tape = Tape()
    return _local.tape


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dt = resolve_dtype(dtype) if dtype is not None else (
            np.asarray(data).dtype.type if isinstance(data, np.ndarray) and data.dtype.type in _FLOATS
            else _default_dtype
        )
        arr = np.array(data, dtype=dt, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dt else data
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None
        self._gbuf: np.ndarray | None = None

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce_var(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dt)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        tape = current_tape()
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        out.name = op
        tape.nodes.append(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-tracked leaf reachable from ``loss``."""
    if loss.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StaleTapeError("loss was not recorded on any tape (no grad-tracked inputs)")
    tape = loss._tape
    if tape is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape.consumed:
        raise StaleTapeError("tape already consumed by an earlier backward(); run a new forward pass")
    loss._gbuf = np.ones_like(loss.data)
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = node._gbuf
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.is_leaf:
                leaves[id(parent)] = parent
                if pg is None:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif pg is not None:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent._gbuf = pg if parent._gbuf is None else parent._gbuf + pg
        node._gbuf = None
    for leaf in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    for node in tape.nodes:
        node._backward = _consumed_backward
        node._gbuf = None
    tape.consumed = True
    tape.nodes = []
    if getattr(_local, "tape", None) is tape:
        _local.tape = Tape()


def _consumed_backward(g):
    raise StaleTapeError("tape already consumed")


# ---------------------------------------------------------------- broadcasting


def _check_binary_shapes(a: tuple, b: tuple, op: str) -> None:
    if a == b or math.prod(a) == 1 or math.prod(b) == 1:
        return
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not compatible (only leading-dim or scalar broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary_prep(a, b, op):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op} needs at least one Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    _check_binary_shapes(a.shape, b.shape, op)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _make(x.data ** p, (x,), bw, "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1 + x.data * (1 - s)),)

    return _make(x.data * s, (x,), bw, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * dinner),)

    return _make(0.5 * v * (1 + t), (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    short, long = (ba, bb) if len(ba) <= len(bb) else (bb, ba)
    if short and long[len(long) - len(short):] != short:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the leading dims into one GEMM each way
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), bw2, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- normalization


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (..., n_classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"label out of range [0, {n})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = max(labels.size, 1)
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return ((p - onehot) * (g / count),)

    return _make(loss, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of bounds for {ndim}-D tensor")
    return axis % ndim


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


def _expand_reduced(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, axes, keepdims, x.shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, axes, keepdims, x.shape) / n,)

    return _make(np.asarray(out), (x,), bw, "mean")


def reduce_var(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by n)."""
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    xc = x.data - x.data.mean(axis=axes, keepdims=True)
    out = (xc * xc).mean(axis=axes, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, axes, keepdims, x.shape) * xc * (2.0 / n),)

    return _make(np.asarray(out), (x,), bw, "var")


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the incoming gradient evenly."""
    axes = _norm_axes(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)

    def bw(g):
        hit = x.data == m
        share = hit / hit.sum(axis=axes, keepdims=True)
        return (_expand_reduced(g, axes, keepdims, x.shape) * share,)

    return _make(np.array(out), (x,), bw, "max")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def unsqueeze(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    a, b = _norm_axis(a, x.ndim), _norm_axis(b, x.ndim)
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) dims to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from None

    return _make(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, x.shape),), "expand")


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with an integer array, not a Tensor")
    out = x.data[idx]
    if np.ndim(out) == 0:
        out = np.asarray(out)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "getitem")


def flip(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    return _make(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), "flip")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of empty list")
    axis = _norm_axis(axis, xs[0].ndim)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat shapes differ off axis {axis}: {[t.shape for t in xs]}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([unsqueeze(t, axis) for t in xs], axis=axis)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """``np.take(x, indices, axis)``; differentiable in ``x`` only."""
    axis = _norm_axis(axis, x.ndim)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather indices must be integers")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")
    out = np.take(x.data, idx, axis=axis)
    k = idx.ndim

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        perm = list(range(axis, axis + k)) + list(range(axis)) + list(range(axis + k, g.ndim))
        np.add.at(moved, idx, np.transpose(g, perm))
        return (gx,)

    return _make(out, (x,), bw, "gather")


def batch_gather(x: Tensor, indices) -> Tensor:
    """Per-batch row gather: ``out[b, ...] = x[b, indices[b, ...]]``."""
    idx = np.asarray(indices)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"batch size mismatch: {x.shape} vs indices {idx.shape}")
    n = x.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"batch_gather index out of range [0, {n})")
    bidx = np.arange(x.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    out = x.data[bidx, idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (bidx, idx), g)
        return (gx,)

    return _make(out, (x,), bw, "batch_gather")


def where_mask(x: Tensor, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Multiply by a constant 0/1 mask (dropout, masking)."""
    m = (np.asarray(mask) * scale).astype(x.dtype)
    return _make(x.data * m, (x,), lambda g: (g * m,), "mask")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Record a hand-written op: ``backward_fn(grad_out)`` returns one gradient per parent."""
    return _make(data, parents, backward_fn, name)
