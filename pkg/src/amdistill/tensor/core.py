"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to the parents' adjoints.
:func:`backward` linearises that graph into a :class:`GradTape` (reverse
topological order) and replays the closures once.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them must be a scalar. Anything else goes through an
explicit :meth:`Tensor.expand`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

Scalar = Union[int, float]
Operand = Union["Tensor", Scalar]

# acos input is clamped to [-1 + eps, 1 - eps]; the derivative diverges at +-1.
ACOS_EPS = {np.dtype(np.float32): 1e-7, np.dtype(np.float64): 1e-12}

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run a block without recording any graph (used for teacher forwards)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(_as_operand(other, self), self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(_as_operand(other, self), self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, p: Scalar) -> "Tensor":
        return power(self, p)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    # -- method forms -------------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def cos(self):
        return cos(self)

    def acos(self):
        return acos(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def logsumexp(self, axes=None, keepdims=False):
        return reduce("logsumexp", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def expand(self, shape):
        return expand(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_operand(x: Operand, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str,
          check: bool = True) -> Tensor:
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- reverse pass ------------------------------------------------------------

class GradTape:
    """Ordered record of the operations reachable from a scalar loss.

    Nodes are stored in execution (topological) order and replayed in reverse.
    A tape is single-use unless built with ``retain_graph``.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes = self._linearise(loss)

    @staticmethod
    def _linearise(root: Tensor):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise GraphError("backward through a graph that was already consumed; "
                                 "pass retain_graph=True to reuse it")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def replay(self, seed: np.ndarray, retain_graph: bool = False) -> None:
        grads = {id(self.loss): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if not retain_graph:
            for node in self.nodes:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._consumed = True


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    tape = GradTape(loss)
    tape.replay(np.ones_like(loss.data), retain_graph=retain_graph)


# -- elementwise ---------------------------------------------------------------

def _binary_operands(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _as_operand(a, b)
    if not isinstance(b, Tensor):
        b = _as_operand(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not equal and neither is a "
                         "scalar; use expand() for explicit broadcasting")
    return a, b


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    # reduce an adjoint back to a scalar operand's shape
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_fit(g * bd, a) if a.requires_grad else None,
                            _fit(g * ad, b) if b.requires_grad else None), "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by exact zero; add a guard to the divisor")
    out = ad / bd

    def bw(g):
        ga = _fit(g / bd, a) if a.requires_grad else None
        gb = _fit(-g * out / bd, b) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: Scalar) -> Tensor:
    if isinstance(p, Tensor):
        if p.ndim != 0 or p.requires_grad:
            raise TypeError("pow supports a constant scalar exponent only")
        p = float(p.data)
    ad = a.data
    out = ad ** p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    # overflow surfaces as NonFiniteError from _make
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def acos(a: Tensor, eps: Optional[float] = None) -> Tensor:
    """Arc-cosine with the input clamped to ``[-1+eps, 1-eps]``.

    Coordinates that were clamped receive zero gradient, matching the clamp.
    """
    if eps is None:
        eps = ACOS_EPS.get(a.dtype, 1e-12)
    ad = a.data
    xc = np.clip(ad, -1.0 + eps, 1.0 - eps)
    inside = (ad >= -1.0 + eps) & (ad <= 1.0 - eps)
    return _make(np.arccos(xc), (a,),
                 lambda g: (np.where(inside, -g / np.sqrt(1.0 - xc * xc), 0.0).astype(g.dtype),),
                 "acos")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return _make(out, (a,), lambda g: (g * keep,), "clamp")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * pos,), "relu")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "pow": power,
    "exp": exp, "log": log, "cos": cos, "acos": acos, "clamp": clamp, "relu": relu,
}


def elementwise(kind: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch by op name; unary kinds ignore ``b``, clamp reads ``lo``/``hi``."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "div", "pow"):
        return fn(a, b)
    if kind == "clamp":
        return fn(a, kwargs.get("lo"), kwargs.get("hi"))
    return fn(a, **kwargs)


# -- shape ops ---------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape", check=False)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),),
                 "transpose", check=False)


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over broadcast axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot expand {src} to {shape}") from None

    def bw(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _make(np.ascontiguousarray(out), (a,), bw, "expand", check=False)


def getitem(a: Tensor, index) -> Tensor:
    src, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), bw, "getitem", check=False)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw, "stack", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat", check=False)


# -- reductions ------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes: Union[None, int, Iterable[int]] = None,
           keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` (all axes when None) with sum, mean, max or logsumexp.

    logsumexp subtracts the per-slice maximum first, so it is finite for any
    finite input.
    """
    if x.ndim == 0:
        raise ShapeError("cannot reduce a tensor that is already a scalar")
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise ShapeError("empty axis list")
    xd = x.data
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def restore(g):
        return np.broadcast_to(g.reshape(kept), x.shape)

    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.array(restore(g)),), "sum")
    if kind == "mean":
        count = int(np.prod([x.shape[i] for i in axes]))
        out = xd.mean(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (restore(g) / count,), "mean")
    if kind == "max":
        m = xd.max(axis=axes, keepdims=True)
        hit = xd == m
        share = hit / hit.sum(axis=axes, keepdims=True)
        out = m if keepdims else m.reshape([n for i, n in enumerate(x.shape) if i not in axes])
        return _make(out, (x,), lambda g: (restore(g) * share,), "max")
    if kind == "logsumexp":
        m = xd.max(axis=axes, keepdims=True)
        shifted = np.exp(xd - m)
        total = shifted.sum(axis=axes, keepdims=True)
        lse = m + np.log(total)
        soft = shifted / total
        out = lse if keepdims else lse.reshape([n for i, n in enumerate(x.shape) if i not in axes])
        return _make(out, (x,), lambda g: (restore(g) * soft,), "logsumexp")
    raise ValueError(f"unknown reduction {kind!r}")


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")
