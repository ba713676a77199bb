"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is taped implicitly: each non-leaf tensor keeps its parents and
a vector-Jacobian closure. ``backward`` topologically sorts the reachable
subgraph and visits every node exactly once, accumulating gradients
additively when a tensor feeds several consumers.

Shapes are strict: apart from documented bias/channel broadcasts there is
no implicit broadcasting, so every mismatch is raised as a
``DimensionError`` naming the offending axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Shape/axis mismatch in a tensor operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (strict same-shape elementwise, scalar allowed) ------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow_scalar(self, k)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> "Graph":
        return backward(self)


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (forward values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def make_node(data: Array, parents: Sequence[Tensor], vjp, name: Optional[str] = None) -> Tensor:
    """Wrap a forward result; records the tape edge only if a parent needs grad."""
    out = Tensor(data, name=name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


class Graph:
    """Topologically ordered record of one backward traversal.

    ``nodes`` is the reverse-topological visit order (loss first); ``roots``
    holds every requires-grad leaf reached by the sweep.
    """

    def __init__(self, nodes: list, roots: list):
        self.nodes = nodes
        self.roots = roots


def topo_order(loss: Tensor) -> list:
    """Iterative post-order DFS over grad-requiring ancestors of ``loss``."""
    order: list = []
    seen = set()
    stack: list = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Graph:
    """Reverse-mode sweep from a scalar loss; populates ``grad`` on every
    requires-grad tensor reached (roots keep theirs, accumulated additively).
    """
    if loss.data.shape != ():
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")
    order = topo_order(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    roots = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g if g.shape == node.data.shape else np.broadcast_to(g, node.data.shape).copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            roots.append(node)
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return Graph(nodes=list(reversed(order)), roots=roots)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise primitives ---------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a  # scalar + tensor
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return make_node(a.data + b.data, (a, b), lambda g: (g, g))
    return make_node(a.data + float(b), (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _same_shape(a, b, "sub")
        return make_node(a.data - b.data, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        return make_node(a.data - float(b), (a,), lambda g: (g,))
    return make_node(float(a) - b.data, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    s = float(b)
    return make_node(a.data * s, (a,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _same_shape(a, b, "div")
        out = a.data / b.data

        def vjp(g):
            return g / b.data, -g * out / b.data

        return make_node(out, (a, b), vjp)
    if isinstance(a, Tensor):
        return mul(a, 1.0 / float(b))
    s = float(a)
    out = s / b.data
    return make_node(out, (b,), lambda g: (-g * out / b.data,))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = a.data ** k
    return make_node(out, (a,), lambda g: (g * k * a.data ** (k - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a: Tensor) -> Tensor:
    # Subgradient at 0 is taken as 0.
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0,1), got {slope}")
    mask = a.data > 0.0
    out = np.where(mask, a.data, slope * a.data)
    # Subgradient at exactly 0 is the negative-side slope.
    return make_node(out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


# -- reductions / shape ops ---------------------------------------------------


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    return make_node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(tuple(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    ref = datas[0].shape
    for d in datas[1:]:
        if len(d.shape) != len(ref) or any(
            i != axis and d.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(f"concat: incompatible shapes {[d.shape for d in datas]} on axis {axis}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(datas)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return make_node(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: slice [{start}:{start + length}] out of range for axis {axis} of size {a.shape[axis]}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[sl] = g
        return (full,)

    return make_node(np.ascontiguousarray(a.data[sl]), (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), vjp)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Broadcast bias over leading axes: a[..., E] + bias[E]."""
    if bias.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {a.shape} with bias {bias.shape}")

    def vjp(g):
        gb = g.reshape(-1, bias.shape[0]).sum(axis=0) if bias.requires_grad else None
        return g, gb

    return make_node(a.data + bias.data, (a, bias), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[N,D] @ weight[D,E] + bias[E]."""
    y = matmul(x, weight)
    return add_bias(y, bias) if bias is not None else y


def affine_channels(x: Tensor, scale: Optional[Tensor], shift: Optional[Tensor]) -> Tensor:
    """Per-(sample, channel) affine over spatial axes: x[N,C,...] * s[N,C] + b[N,C]."""
    n, c = x.shape[0], x.shape[1]
    spatial = x.ndim - 2
    for t, tag in ((scale, "scale"), (shift, "shift")):
        if t is not None and t.shape != (n, c):
            raise DimensionError(f"affine_channels: {tag} shape {t.shape} != ({n}, {c})")
    expand = (n, c) + (1,) * spatial
    out = x.data
    if scale is not None:
        out = out * scale.data.reshape(expand)
    if shift is not None:
        out = out + shift.data.reshape(expand)
    parents = [x] + [t for t in (scale, shift) if t is not None]
    sum_axes = tuple(range(2, x.ndim))

    def vjp(g):
        gx = g * scale.data.reshape(expand) if scale is not None else g
        grads = [gx]
        if scale is not None:
            grads.append((g * x.data).sum(axis=sum_axes) if scale.requires_grad else None)
        if shift is not None:
            grads.append(g.sum(axis=sum_axes) if shift.requires_grad else None)
        return tuple(grads)

    return make_node(out, tuple(parents), vjp)
