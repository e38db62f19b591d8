"""Dense tensors with tape-based reverse-mode differentiation.

Every model in the package is written against this module. Tensors are
immutable values around a numpy array; an active :class:`Tape` records each
primitive applied to a tensor that requires a gradient, and
:meth:`Tape.gradient` replays the record backwards.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DimensionError, EmptyLossError, FrozenParameterError, NumericError

_local = threading.local()
_FAULTY_OPS: set[str] = set()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitives; use as a context manager.

    Nodes are appended in execution order, so the list is already a
    topological sort of the graph.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            if node.op in _FAULTY_OPS:
                in_grads = [None if gi is None else gi * 1.5 + 1e-3 for gi in in_grads]
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. each source; zeros when unreachable."""
        grads = self.backward(loss)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.dtype).reshape(s.shape))
        return out


@contextlib.contextmanager
def inject_backward_fault(op: str):
    """Corrupt the backward rule of one primitive (negative-control hook)."""
    _FAULTY_OPS.add(op)
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the other operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"matmul: {err}") from None

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _result(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward, "gelu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


_ELEMENTWISE = {"tanh": tanh, "relu": relu, "gelu": gelu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch ``kind`` in {tanh, relu, gelu, exp, log, add, sub, mul, scale}."""
    if kind in _ELEMENTWISE:
        return _ELEMENTWISE[kind](x)
    if kind in _BINARY:
        return _BINARY[kind](x, other)
    if kind == "scale":
        return scale(x, float(other))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --- reductions and normalisers ---------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm: gain/bias must match the feature dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# --- indexing and shape -----------------------------------------------------

def gather_rows(table, indices) -> Tensor:
    """``table[indices]``; the gradient is scatter-added back into rows."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("gather_rows needs a 2-d table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), backward, "gather_rows")


def index_select(x, indices, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(np.moveaxis(x.data, axis, 0))
        np.add.at(gx, idx, np.moveaxis(g, axis, 0))
        return (np.moveaxis(gx, 0, axis),)

    return _result(out, (x,), backward, "index_select")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: ragged shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(out, tensors, backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: {err}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)
    return _result(out, (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.asarray(out), (x,), backward, "getitem")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (unbroadcast(g, x.shape),), "broadcast_to")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# --- losses -----------------------------------------------------------------

def weighted_nll(logits, targets, weights) -> Tensor:
    """``sum_i weights[i] * -log softmax(logits[i])[targets[i]]``."""
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=logits.dtype)
    if logits.ndim != 2 or tgt.shape != (logits.shape[0],) or w.shape != tgt.shape:
        raise DimensionError("weighted_nll expects logits (n, v), targets (n,), weights (n,)")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise IndexError("target id out of vocabulary range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    nll = (np.log(s[:, 0]) + m[:, 0]) - z[rows, tgt]
    out = np.asarray(np.dot(w, nll), dtype=logits.dtype)

    def backward(g):
        p = e / s
        p[rows, tgt] -= 1.0
        return (p * (w[:, None] * g),)

    return _result(out, (logits,), backward, "weighted_nll")


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean token NLL over positions where ``mask`` is true."""
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    m = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked")
    return weighted_nll(logits, np.where(m, tgt, 0), m / count)


# --- gradient checking ------------------------------------------------------

def check_gradients(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    metric: str = "coordinate",
) -> dict[str, float]:
    """Relative error per input between the tape and central differences.

    ``f`` receives a mapping of fresh tensors and must return a scalar.
    With ``metric="coordinate"`` the worst per-coordinate error
    ``|a - n| / max(|a|, |n|, 1e-8)`` is reported. ``metric="norm"``
    reports ``||a - n|| / max(||a||, ||n||, 1e-8)`` over the checked
    coordinates, which stays meaningful when single entries of a large
    gradient sit at the roundoff floor. ``max_coords`` subsamples
    coordinates per input for large graphs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if metric not in ("coordinate", "norm"):
        raise ValueError(f"unknown metric {metric!r}")
    base = {k: np.array(v, copy=True) for k, v in inputs.items()}
    tracked = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    with Tape() as tape:
        y = f(tracked)
    if y.size != 1:
        raise DimensionError("gradient check needs a scalar function")
    analytic = dict(zip(tracked, tape.gradient(y, tracked.values())))

    def evaluate(name, data):
        args = {k: Tensor(data if k == name else v) for k, v in base.items()}
        try:
            val = float(f(args).data)
        except NumericError as err:
            raise NumericError(f"function evaluation failed during gradient check: {err}") from None
        if not math.isfinite(val):
            raise NumericError("function evaluation is not finite")
        return val

    rng = np.random.default_rng(seed)
    report = {}
    for name, x0 in base.items():
        flat = np.arange(x0.size)
        if max_coords is not None and x0.size > max_coords:
            flat = rng.choice(x0.size, size=max_coords, replace=False)
        a_vals, n_vals = [], []
        for i in flat:
            idx = np.unravel_index(i, x0.shape)
            xp = x0.copy()
            xp[idx] += eps
            xm = x0.copy()
            xm[idx] -= eps
            n_vals.append((evaluate(name, xp) - evaluate(name, xm)) / (2 * eps))
            a_vals.append(float(analytic[name][idx]))
        a_arr, n_arr = np.array(a_vals), np.array(n_vals)
        if metric == "coordinate":
            errs = np.abs(a_arr - n_arr) / np.maximum(np.maximum(np.abs(a_arr), np.abs(n_arr)), 1e-8)
            report[name] = float(errs.max()) if errs.size else 0.0
        else:
            scale = max(np.linalg.norm(a_arr), np.linalg.norm(n_arr), 1e-8)
            report[name] = float(np.linalg.norm(a_arr - n_arr) / scale)
    return report


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, max_coords=None, seed=0) -> float:
    """Single-input form of :func:`check_gradients`."""
    x = np.asarray(as_tensor(x).data)
    return check_gradients(lambda d: f(d["x"]), {"x": x}, eps=eps, max_coords=max_coords, seed=seed)["x"]


# --- parameters -------------------------------------------------------------

class ParamStore:
    """Named parameters with a per-entry trainable flag.

    Arrays are copied on insert and made read-only. Only trainable entries
    can be reassigned; flags cannot change while the store is locked.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._locked = False

    def add(self, name: str, value, trainable: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, copy=True)
        arr.setflags(write=False)
        t = Tensor(arr, requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, prefixes: Iterable[str]) -> None:
        """Make exactly the entries matching one of ``prefixes`` trainable."""
        if self._locked:
            raise FrozenParameterError("trainable flags are locked for the current stage")
        prefixes = tuple(prefixes)
        for name, t in self._tensors.items():
            flag = name.startswith(prefixes) if prefixes else False
            self._trainable[name] = flag
            self._tensors[name] = Tensor(t.data, requires_grad=flag)

    @contextlib.contextmanager
    def locked(self):
        self._locked = True
        try:
            yield self
        finally:
            self._locked = False

    def assign(self, name: str, value) -> None:
        if not self._trainable[name]:
            raise FrozenParameterError(f"parameter {name!r} is frozen")
        old = self._tensors[name]
        arr = np.asarray(value, dtype=old.dtype)
        if arr.shape != old.shape:
            raise DimensionError(f"assign {name!r}: shape {arr.shape} != {old.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        self._tensors[name] = Tensor(arr, requires_grad=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._tensors.items() if self._trainable[n] or not trainable_only)

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n, t in self._tensors.items():
            new.add(n, t.data, self._trainable[n])
        return new


def count_parameters(store: ParamStore, trainable_only: bool = False) -> int:
    return store.count(trainable_only)
