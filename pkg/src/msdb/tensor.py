"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Graph`.
Outside a graph nothing is recorded, so evaluation code pays no tape cost.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (x * x).sum()
    ...     g.backward(loss)
    >>> x.grad
    array([6.], dtype=float32)
"""
from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "ShapeError",
    "Tensor",
    "concat",
    "get_default_dtype",
    "grad_check",
    "precision",
    "set_default_dtype",
    "softmax_channelwise",
]


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation graph."""


_default_dtype: type = np.float32
_graph_stack: list["Graph"] = []


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64, np.longdouble):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (float32 or float64)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Ordered record of primitive operations.

    Nodes are appended in execution order; :meth:`backward` walks them in
    exact reverse. Leaf gradients accumulate across calls until reset.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward) -> None:
        out._graph = weakref.ref(self)
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if loss.graph is not self:
            raise GraphError("loss tensor was not produced on this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            gins = node.backward(gout)
            for inp, gin in zip(node.inputs, gins):
                if gin is None or not inp.requires_grad:
                    continue
                if gin.shape != inp.shape:
                    raise ShapeError(
                        f"gradient shape {gin.shape} != input shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
                if inp.graph is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def current_graph() -> Graph | None:
    return _graph_stack[-1] if _graph_stack else None


def _as_array(value, dtype) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array of reals with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._graph = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._graph = None
        return out

    # -- introspection ---------------------------------------------------
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
    def graph(self) -> Graph | None:
        return self._graph() if self._graph is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        graph = self.graph
        if graph is None:
            raise GraphError("tensor was not produced on a live graph")
        graph.backward(self)

    # -- arithmetic ------------------------------------------------------
    def _binary(self, other, fwd, bwd_self, bwd_other) -> "Tensor":
        other_t = other if isinstance(other, Tensor) else None
        a = self.data
        b = _as_array(other, a.dtype)
        out_data = fwd(a, b)

        def backward(g):
            ga = _unbroadcast(bwd_self(g, a, b), a.shape)
            if other_t is None:
                return (ga,)
            return ga, _unbroadcast(bwd_other(g, a, b), b.shape)

        inputs = (self,) if other_t is None else (self, other_t)
        return apply_op(out_data, inputs, backward)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return self._binary(
            other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def __neg__(self):
        return apply_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        out = np.power(x, exponent)

        def backward(g):
            if exponent == 0:
                return (np.zeros_like(x),)
            return (g * exponent * np.power(x, exponent - 1),)

        return apply_op(out, (self,), backward)

    def log(self):
        x = self.data
        return apply_op(np.log(x), (self,), lambda g: (g / x,))

    def exp(self):
        out = np.exp(self.data)
        return apply_op(out, (self,), lambda g: (g * out,))

    def clip(self, lo: float, hi: float):
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return apply_op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    def relu(self):
        x = self.data
        mask = x > 0
        return apply_op(np.where(mask, x, 0).astype(x.dtype), (self,), lambda g: (g * mask,))

    # -- reductions and reshaping ---------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return apply_op(np.asarray(out, dtype=self.dtype), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return apply_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def __getitem__(self, index):
        x = self.data
        out = np.ascontiguousarray(x[index])
        if out.size == 0:
            raise ShapeError(f"index {index!r} selects nothing from {x.shape}")

        def backward(g):
            gx = np.zeros_like(x)
            gx[index] = g
            return (gx,)

        return apply_op(out, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return apply_op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inverse),),
        )


def apply_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap ``out_data`` and record it on the active graph if any input needs grad."""
    out = Tensor._wrap(out_data)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(out, inputs, backward)
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ShapeError(f"cannot concat {t.shape} with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=ax)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(xs))
        )

    return apply_op(out, xs, backward)


def softmax_channelwise(x: Tensor, axis: int = -3) -> Tensor:
    """Numerically stable softmax over the channel axis of a ``[N×]C×H×W`` tensor."""
    if x.ndim < 3:
        raise ShapeError(f"expected C×H×W or N×C×H×W, got {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_op(y, (x,), backward)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    The analytic gradient is taken at ``x``'s precision. Central differences
    are evaluated in extended precision (``np.longdouble``) so that the
    reference is not limited by rounding of ``f`` itself.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x)
    dtype = base.dtype.type if base.dtype.type in (np.float32, np.float64) else _default_dtype
    if eps is None:
        eps = 1e-3 if dtype is np.float32 else 1e-6

    with precision(dtype):
        xt = Tensor(base, requires_grad=True, dtype=dtype)
        with Graph() as g:
            y = f(xt)
            if y.size != 1:
                raise GraphError(f"grad_check needs a scalar function, got {y.shape}")
            g.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)

    def scalar(arr: np.ndarray):
        with precision(np.longdouble):
            out = f(Tensor(arr, dtype=np.longdouble))
        if out.size != 1:
            raise GraphError(f"grad_check needs a scalar function, got {out.shape}")
        return out.data.reshape(-1)[0]

    xr = base.astype(np.longdouble)
    numeric = np.zeros_like(xr)
    flat, nflat = xr.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = scalar(xr)
        flat[i] = orig - eps
        minus = scalar(xr)
        flat[i] = orig
        nflat[i] = (plus - minus) / (2 * flat.dtype.type(eps))

    a = analytic.astype(np.longdouble)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
