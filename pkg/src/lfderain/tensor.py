"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients.  :func:`backward` walks the recorded graph
in reverse topological order and returns a :class:`Gradients` mapping from
leaf tensors to their gradient arrays.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> g = backward(sum_(x * x))
>>> g[x]
array([2., 4.])
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

__all__ = [
    "Tensor", "Gradients", "as_tensor", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "relu", "clamp", "exp", "log",
    "sigmoid", "tanh", "softplus", "abs_", "square", "sqrt",
    "sum_", "mean", "l2_norm", "matmul", "softmax",
    "reshape", "permute", "transpose", "concat", "getitem", "pad", "detach",
    "finite_diff_check",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the graph node that produced it.

    Parameters
    ----------
    data : array_like
        Values; copied to a contiguous float64 array.
    requires_grad : bool
        Mark as a tracked leaf.
    name : str, optional
        Label used by checkpoints and error messages.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DomainError("tensors must hold at least one element")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # construction of interior nodes skips the defensive copy
    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = fn if track else None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Return a constant copy-free view of ``x`` cut from the graph."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.name = x.name
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


class Gradients(dict):
    """Mapping from tracked leaf tensors to gradient arrays.

    Keys are tensors compared by identity; missing leaves map to zeros
    through :meth:`of`.
    """

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(loss: Tensor) -> Gradients:
    """Differentiate a scalar ``loss`` with respect to every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads

    # iterative post-order; deep recurrent graphs overflow Python recursion
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = pg if prev is None else prev + pg
    return grads


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor._node(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor._node(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Tensor._node(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape),
                                   _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return Tensor._node(out, (a, b),
                        lambda g: (_unbroadcast(g / b.data, a.shape),
                                   _unbroadcast(-g * out / b.data, b.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._node(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    if lo > hi:
        raise DomainError(f"clamp: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._node(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._node(out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return Tensor._node(out, (x,), lambda g: (g * _sigmoid_np(x.data),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    return Tensor._node(out, (x,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


# ---------------------------------------------------------------------------
# reductions and products

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor._node(np.asarray(out), (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axis=axes, keepdims=keepdims), 1.0 / n)


def l2_norm(x) -> Tensor:
    """Euclidean norm of all elements; gradient 0 at the origin."""
    x = as_tensor(x)
    nrm = float(np.sqrt(np.sum(x.data * x.data)))

    def fn(g):
        if nrm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / nrm,)
    return Tensor._node(np.asarray(nrm), (x,), fn)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Tensor._node(out, (a, b), fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._node(out, (x,), fn)


# ---------------------------------------------------------------------------
# layout

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor._node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % max(x.ndim, 1) for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"invalid axis order {axes} for shape {x.shape}")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._node(out, (x,), lambda g: (g.transpose(inv),))


def permute(x, axis_a: int, axis_b: int) -> Tensor:
    """Swap two axes; the gradient applies the same swap."""
    x = as_tensor(x)
    n = x.ndim
    for ax in (axis_a, axis_b):
        if not -n <= ax < n:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
    order = list(range(n))
    a, b = axis_a % n, axis_b % n
    order[a], order[b] = order[b], order[a]
    return transpose(x, order)


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(xs)))
    return Tensor._node(out, xs, fn)


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back."""
    x = as_tensor(x)
    out = x.data[idx]
    if isinstance(out, np.ndarray):
        out = out.copy()
    else:
        out = np.asarray(out)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else _assign_add(full, idx, g)
        return (full,)
    return Tensor._node(out, (x,), fn)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, idx, g):
    full[idx] += g


def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` has one (before, after) pair per axis."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ShapeError(f"pad widths for {len(widths)} axes, tensor has {x.ndim}")
    out = np.pad(x.data, widths)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return Tensor._node(out, (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, samples: int = 10,
                      h: float = 1e-4, rng: np.random.Generator | int | None = 0) -> float:
    """Max relative error between backward and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    ``samples`` coordinates of ``x`` are drawn without replacement (all of
    them when ``x`` is smaller).  The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng(rng)
    leaf = Tensor(x.data, requires_grad=True)
    loss = f(leaf)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss at the evaluation point")
    analytic = backward(loss).of(leaf)
    n = leaf.size
    picks = rng.choice(n, size=min(samples, n), replace=False)
    worst = 0.0
    base = x.data.copy()
    with no_grad():
        for flat in picks:
            idx = np.unravel_index(flat, base.shape)
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            fp = f(Tensor(plus)).item()
            fm = f(Tensor(minus)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing coordinate {idx}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
