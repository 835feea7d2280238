"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations executed while a :class:`Tape` is active are recorded in execution
order; ``Tape.backward`` replays them in reverse.  Outside a tape every op is a
plain numpy computation, which is what inference uses.

Broadcasting is deliberately restricted to scalars.  Row broadcasts are spelled
out with :func:`repeat_rows` so gradient routing stays explicit.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "relu",
    "leaky_relu",
    "elu",
    "elementwise",
    "softmax",
    "log_softmax",
    "concat",
    "transpose",
    "reshape",
    "take",
    "sum",
    "mean",
    "max",
    "norm",
    "repeat_rows",
    "segment_sum",
    "segment_softmax",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor: takes ownership of ``arr`` without copying
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A trainable leaf.  Only optimizers replace its data, never in place."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to parameter of shape {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    ``backward`` may run once; a second call raises :class:`TapeError`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self._leaves.setdefault(id(p), p)
        self._produced.add(id(out))
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every tracked leaf; returns leaf -> grad."""
        if self._done:
            raise TapeError("backward() already ran on this tape; start a new Tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.grads = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            self.grads[key] = np.zeros_like(leaf.data) if g is None else g
        return {leaf: self.grads[key] for key, leaf in self._leaves.items()}

    def gradient(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; exactly zero when ``t`` never reached the loss."""
        if not self._done:
            raise TapeError("gradient() called before backward()")
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor._wrap(data, True)
        tape._record(out, parents, backward)
        return out
    return Tensor._wrap(data, False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), backward)


def _is_scalar(x: Tensor) -> bool:
    return x.data.size == 1 and x.data.ndim <= 2 and all(d == 1 for d in x.data.shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar broadcast)")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


def _fit(arr: np.ndarray, a: Tensor, b: Tensor) -> np.ndarray:
    # scalar (1,1) op matrix should keep the matrix shape, not become (1,1)
    target = a.shape if a.data.size >= b.data.size else b.shape
    return arr.reshape(target)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a) if a.requires_grad else None, _unbroadcast(g, b) if b.requires_grad else None)

    return _result(_fit(a.data + b.data, a, b), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a) if a.requires_grad else None, _unbroadcast(-g, b) if b.requires_grad else None)

    return _result(_fit(a.data - b.data, a, b), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(_fit(g * B, a, b), a) if a.requires_grad else None
        gb = _unbroadcast(_fit(g * A, a, b), b) if b.requires_grad else None
        return ga, gb

    return _result(_fit(A * B, a, b), (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: (g * 0.5 / y,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    X = x.data
    scale = np.where(X > 0, 1.0, slope)
    return _result(X * scale, (x,), lambda g: (g * scale,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    X = x.data
    neg_part = alpha * np.expm1(np.minimum(X, 0.0))
    y = np.where(X > 0, X, neg_part)
    dy = np.where(X > 0, 1.0, neg_part + alpha)
    return _result(y, (x,), lambda g: (g * dy,))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of sigmoid, tanh, add, mul, sub by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    X = x.data
    if X.ndim == 0 or X.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {X.shape}, axis {axis})")
    z = np.exp(X - X.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    X = x.data
    if X.ndim == 0 or X.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis (shape {X.shape}, axis {axis})")
    shifted = X - X.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(p.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: non-axis dims differ: {[q.shape for q in parts]} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=ax)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _result(y.copy(), (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing (slices, ints, integer arrays); gradient scatters back."""
    X = x.data
    y = X[index]
    if not isinstance(y, np.ndarray):
        y = np.array(y)
    y = np.array(y, copy=True)

    def backward(g):
        out = np.zeros_like(X)
        np.add.at(out, index, g)
        return (out,)

    return _result(y, (x,), backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    X = x.data
    y = X.sum(axis=axis, keepdims=axis is not None)
    if axis is None:
        y = np.array(y)

    def backward(g):
        return (np.broadcast_to(g, X.shape).copy(),)

    return _result(y, (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max(x: Tensor, axis: int = 0) -> Tensor:  # noqa: A001
    """Max along ``axis`` (kept as a length-1 dim); gradient to the first argmax."""
    X = x.data
    if X.shape[axis] == 0:
        raise ShapeError(f"max over an empty axis (shape {X.shape})")
    idx = np.expand_dims(X.argmax(axis=axis), axis)
    y = np.take_along_axis(X, idx, axis=axis)

    def backward(g):
        out = np.zeros_like(X)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _result(y, (x,), backward)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (kept dim).  Gradient at the origin is 0."""
    X = x.data
    y = np.sqrt((X * X).sum(axis=axis, keepdims=True))

    def backward(g):
        safe = np.where(y > 0, y, 1.0)
        return (g * X / safe * (y > 0),)

    return _result(y, (x,), backward)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a 1 x d row into n x d."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows needs a 1 x d tensor, got {x.shape}")
    return _result(np.repeat(x.data, n, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def segment_sum(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets; row i goes to ``segments[i]``."""
    seg = np.asarray(segments, dtype=np.int64)
    X = x.data
    if seg.shape[0] != X.shape[0]:
        raise ShapeError(f"segment_sum: {seg.shape[0]} segment ids for {X.shape[0]} rows")
    out = np.zeros((n_segments,) + X.shape[1:])
    np.add.at(out, seg, X)
    return _result(out, (x,), lambda g: (g[seg],))


def segment_softmax(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax over the rows sharing a segment id, independently per column."""
    seg = np.asarray(segments, dtype=np.int64)
    X = x.data
    if seg.shape[0] != X.shape[0]:
        raise ShapeError(f"segment_softmax: {seg.shape[0]} segment ids for {X.shape[0]} rows")
    top = np.full((n_segments,) + X.shape[1:], -np.inf)
    np.maximum.at(top, seg, X)
    z = np.exp(X - top[seg])
    denom = np.zeros((n_segments,) + X.shape[1:])
    np.add.at(denom, seg, z)
    y = z / denom[seg]

    def backward(g):
        gy = g * y
        tot = np.zeros((n_segments,) + X.shape[1:])
        np.add.at(tot, seg, gy)
        return (gy - y * tot[seg],)

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``wrt``.

    Temporarily swaps ``wrt.data``; runs without a tape.
    """
    base = wrt.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * eps
            arr = bumped.reshape(base.shape)
            arr.flags.writeable = False
            wrt.data = arr
            val = float(np.asarray(fn().data).sum())
            grad.reshape(-1)[i] += sign * val
    wrt.data = base
    return grad / (2 * eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.maximum(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(diff / scale)


def parameters_of(objs: Iterable) -> list[Parameter]:
    """Flatten nested containers of Parameters, dropping duplicates by identity."""
    seen: dict[int, Parameter] = {}

    def walk(o):
        if isinstance(o, Parameter):
            seen.setdefault(id(o), o)
        elif isinstance(o, dict):
            for v in o.values():
                walk(v)
        elif isinstance(o, (list, tuple)):
            for v in o:
                walk(v)

    walk(list(objs))
    return list(seen.values())
