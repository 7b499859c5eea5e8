"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive is a plain function taking and returning :class:`Tensor`.
While a :class:`GradTape` is active, primitives whose inputs require a
gradient are recorded together with their adjoint rule; :func:`backward`
replays the tape in reverse and writes parameter gradients into a
:class:`ParamStore`.

    store = ParamStore()
    store.add("w", np.ones((3, 2)))
    with GradTape() as tape:
        loss = sum_(matmul(constant(x), store.tensor("w")))
    backward(tape, loss, store)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array of float64 values.

    ``name`` is set only for parameter leaves handed out by a ParamStore.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


# ---------------------------------------------------------------------------
# tape


_state = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records primitive applications in execution order.

    A tape may be replayed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable, Callable | None]] = []
        self.consumed = False

    def __enter__(self) -> GradTape:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable,
          grad_into: Callable | None = None) -> Tensor:
    _check_finite(out, op)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.entries.append((result, inputs, grad_fn, grad_into))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-d operands are treated as row/column vectors."""
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-d/2-d operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {A.shape} x {B.shape}")
    out = A @ B
    A2 = A if A.ndim == 2 else A[None, :]
    B2 = B if B.ndim == 2 else B[:, None]

    def grad(g, skip_b=False):
        G2 = g.reshape(A2.shape[0], B2.shape[1])
        ga = (G2 @ B2.T).reshape(A.shape) if a.requires_grad else None
        gb = (A2.T @ G2).reshape(B.shape) if b.requires_grad and not skip_b else None
        return ga, gb

    def grad_b_into(g, slot):
        # writes d/dB straight into a parameter's gradient slot
        np.matmul(A2.T, g.reshape(A2.shape[0], B2.shape[1]), out=slot.reshape(B2.shape))

    return _emit("matmul", out, (a, b), grad, grad_b_into)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def grad(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), grad)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), grad)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    X = x.data
    n = X.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm parameters must have shape ({n},)")
    mu = X.mean(axis=-1, keepdims=True)
    centered = X - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def grad(g):
        gx = gg = gb = None
        if x.requires_grad:
            d = g * gain.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gain, bias), grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), grad)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (repeated indices allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def grad(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit("take", out, (a,), grad)


def pick(a: Tensor, cols) -> Tensor:
    """``a[i, cols[i]]`` for every row i of a 2-d tensor."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, cols]

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _emit("pick", out, (a,), grad)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), grad)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum_(a), 1.0 / n)


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamStore:
    """Named float64 parameters, each with a gradient slot of the same shape.

    Iteration is lexicographic by name. Parameter arrays are updated in place
    by the optimiser; leaves from :meth:`tensor` are views of the live values.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE, copy=True)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return sorted(self._values)

    def __iter__(self):
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def tensor(self, name: str) -> Tensor:
        return Tensor(self._values[name], requires_grad=True, name=name)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        if arr.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name][...] = arr

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return ((n, self._values[n]) for n in self.names())


def backward(tape: GradTape, loss: Tensor, store: ParamStore) -> None:
    """Replay ``tape`` in reverse, writing d(loss)/d(param) into ``store``.

    Parameters not reached from ``loss`` get a zero gradient.
    """
    if tape.consumed:
        raise TapeError("tape already consumed; record a new forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    touched: set[str] = set()
    adjoints: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        adjoints[id(loss)] = np.ones_like(loss.data)
    for out, inputs, grad_fn, grad_into in reversed(tape.entries):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        last = inputs[-1]
        if grad_into is not None and last.name is not None and last.name not in touched:
            grad_into(g, store.grad(last.name))
            touched.add(last.name)
            grads = grad_fn(g, skip_b=True)
        else:
            grads = grad_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.name is not None:
                slot = store.grad(t.name)
                if t.name in touched:
                    slot += gi
                else:
                    np.copyto(slot, gi)
                    touched.add(t.name)
            else:
                key = id(t)
                prev = adjoints.get(key)
                adjoints[key] = gi if prev is None else prev + gi
    for name in store.names():
        if name not in touched:
            store.grad(name).fill(0.0)
    tape.entries.clear()


def finite_difference_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    coords: Sequence[tuple[str, int]] | None = None,
    n_samples: int = 200,
    seed: int = 0,
    group: Callable[[str], str] | None = None,
) -> float:
    """Max over sampled coordinates of |analytic - central| / max(1, |analytic|).

    ``f`` recomputes the scalar loss from the current values in ``store``.
    When ``coords`` is omitted, at least one flat index of every parameter
    group is sampled (each tensor is its own group unless ``group`` maps names
    to coarser keys) and the rest are spread uniformly over all entries until
    ``n_samples`` is reached.
    """
    with GradTape() as tape:
        loss = f()
    _require_finite_scalar(loss)
    backward(tape, loss, store)
    if coords is None:
        coords = sample_coordinates(store, n_samples, seed, group)
    worst = 0.0
    for name, flat in coords:
        value = store.value(name).reshape(-1)
        analytic = float(store.grad(name).reshape(-1)[flat])
        orig = value[flat]
        value[flat] = orig + h
        up = _require_finite_scalar(f())
        value[flat] = orig - h
        down = _require_finite_scalar(f())
        value[flat] = orig
        numeric = (up - down) / (2.0 * h)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


def sample_coordinates(store: ParamStore, n_samples: int, seed: int = 0,
                       group: Callable[[str], str] | None = None) -> list[tuple[str, int]]:
    rng = np.random.default_rng(seed)
    names = store.names()
    sizes = np.array([store.value(n).size for n in names], dtype=float)
    members: dict[str, list[int]] = {}
    for i, n in enumerate(names):
        members.setdefault(group(n) if group else n, []).append(i)
    coords = []
    for idx in members.values():
        i = idx[int(rng.choice(len(idx), p=sizes[idx] / sizes[idx].sum()))] if len(idx) > 1 else idx[0]
        coords.append((names[i], int(rng.integers(sizes[i]))))
    extra = max(0, n_samples - len(coords))
    if extra:
        picks = rng.choice(len(names), size=extra, p=sizes / sizes.sum())
        coords += [(names[i], int(rng.integers(sizes[i]))) for i in picks]
    return coords


def _require_finite_scalar(t: Tensor) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise NumericError("function value is not finite")
    return v
