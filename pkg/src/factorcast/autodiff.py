"""Reverse-mode automatic differentiation on numpy arrays.

A `Node` wraps a float64 array of rank <= 3 and remembers the operation
that produced it. Values are computed eagerly; `backward(root)` walks the
graph once in reverse topological order and accumulates d(root)/d(node)
into each node's `.grad`. Repeated backward calls keep accumulating until
`zero_grads` is used.

Shape rules follow numpy broadcasting; gradients of broadcast operands are
summed back to the operand's shape. Every node's value is checked for
NaN/Inf at creation time.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A node value contains NaN or Inf."""


def _check_finite(value: np.ndarray, op: str) -> None:
    # One vectorized reduction: any NaN or +/-Inf makes the sum non-finite.
    if not np.isfinite(np.sum(value)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Node:
    __slots__ = ("value", "grad", "_parents", "_vjp", "op")

    # make numpy defer to the reflected operators instead of broadcasting
    # elementwise over the Node object
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > 3:
            raise ShapeError(f"rank {v.ndim} > 3 not supported (op '{op}', shape {v.shape})")
        _check_finite(v, op)
        self.value = v
        self.grad = np.zeros_like(v)
        self._parents = parents
        self._vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)


def as_node(x) -> Node:
    """Lift a raw array/scalar into a constant leaf node."""
    return x if isinstance(x, Node) else Node(x, op="const")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were size-1 in the original
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from exc
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                op="add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} - {b.shape}") from exc
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                op="sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from exc
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)),
                op="mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value / b.value
    except ValueError as exc:
        raise ShapeError(f"div: {a.shape} / {b.shape}") from exc
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape),
                           _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
                op="div")


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,), op="neg")


def pow_const(a, exponent: float) -> Node:
    a = as_node(a)
    if isinstance(exponent, Node):
        raise ShapeError("pow: exponent must be a python scalar")
    out = a.value ** exponent
    return Node(out, (a,),
                lambda g: (g * exponent * a.value ** (exponent - 1),),
                op=f"pow{exponent}")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, (a, b), vjp, op="matmul")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),), op="tanh")


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), op="exp")


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.value)
        except FloatingPointError as exc:
            raise NonFiniteError("log of non-positive value") from exc
    return Node(out, (a,), lambda g: (g / a.value,), op="log")


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="raise"):
        try:
            out = np.sqrt(a.value)
        except FloatingPointError as exc:
            raise NonFiniteError("sqrt of negative value") from exc

    def vjp(g):
        # clamp avoids 0-division when the input is exactly 0
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return Node(out, (a,), vjp, op="sqrt")


def relu(a) -> Node:
    a = as_node(a)
    out = np.maximum(a.value, 0.0)
    return Node(out, (a,), lambda g: (g * (a.value > 0),), op="relu")


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Node(out, (a,), vjp, op="softmax")


def reduce_sum(a, axis=None) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return Node(out, (a,), vjp, op="sum")


def reduce_mean(a, axis=None) -> Node:
    a = as_node(a)
    out = a.value.mean(axis=axis)
    if axis is None:
        count = a.value.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.shape).copy(),)

    return Node(out, (a,), vjp, op="mean")


def frobenius_norm(a) -> Node:
    """sqrt(sum of squares) over all entries; the L2 norm for vectors."""
    a = as_node(a)
    out = np.sqrt(np.sum(a.value * a.value))

    def vjp(g):
        return (g * a.value / max(out, 1e-300),)

    return Node(out, (a,), vjp, op="frobenius")


def concat(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat axis {axis}: {[n.shape for n in nodes]}") from exc
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(out, tuple(nodes), vjp, op="concat")


def getitem(a, key) -> Node:
    a = as_node(a)
    out = a.value[key]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return Node(out, (a,), vjp, op="slice")


def take(a, indices, axis: int) -> Node:
    """Gather along one axis with an integer index array."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        key = [slice(None)] * a.value.ndim
        key[axis] = idx
        np.add.at(full, tuple(key), g)
        return (full,)

    return Node(out, (a,), vjp, op="take")


def transpose(a, axes) -> Node:
    a = as_node(a)
    inverse = np.argsort(axes)
    return Node(np.transpose(a.value, axes), (a,),
                lambda g: (np.transpose(g, inverse),), op="transpose")


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return Node(out, (a,), lambda g: (g.reshape(a.shape),), op="reshape")


def conv1d(x, w, bias=None, dilation: int = 1) -> Node:
    """Causal dilated 1-D convolution.

    x: (C_in, T) or (B, C_in, T); w: (C_out, C_in, k); bias: (C_out,) or None.
    (k-1)*dilation zeros are prepended internally so the output keeps length T.
    `out[..., o, t] = sum_{c,j} w[o, c, j] * x[..., c, t - (k-1-j)*dilation]`.
    """
    x, w = as_node(x), as_node(w)
    if w.value.ndim != 3:
        raise ShapeError(f"conv1d: weight must be (C_out, C_in, k), got {w.shape}")
    batched = x.value.ndim == 3
    if x.value.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input must be (C_in, T) or (B, C_in, T), got {x.shape}")
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-2]} != weight C_in {c_in}")
    if dilation < 1:
        raise ShapeError(f"conv1d: dilation must be >= 1, got {dilation}")
    t_len = x.shape[-1]
    pad = (k - 1) * dilation
    pad_width = ((0, 0), (0, 0), (pad, 0)) if batched else ((0, 0), (pad, 0))
    xp = np.pad(x.value, pad_width)

    out = np.zeros(x.shape[:-2] + (c_out, t_len))
    for j in range(k):
        seg = xp[..., :, j * dilation: j * dilation + t_len]
        out += np.einsum("oc,...ct->...ot", w.value[:, :, j], seg)

    parents = [x, w]
    if bias is not None:
        b = as_node(bias)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.shape} != ({c_out},)")
        out = out + b.value[:, None]
        parents.append(b)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.value)
        w_spec = "bot,bct->oc" if batched else "ot,ct->oc"
        for j in range(k):
            seg = xp[..., :, j * dilation: j * dilation + t_len]
            gw[:, :, j] = np.einsum(w_spec, g, seg)
            gxp[..., :, j * dilation: j * dilation + t_len] += np.einsum(
                "oc,...ot->...ct", w.value[:, :, j], g)
        gx = gxp[..., :, pad:]
        grads = [gx, gw]
        if bias is not None:
            axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return Node(out, tuple(parents), vjp, op="conv1d")


def linear(x, w, b=None) -> Node:
    """Affine map on the last axis: x (..., n_in) @ w (n_in, n_out) + b."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def square(a) -> Node:
    a = as_node(a)
    return mul(a, a)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order  # parents appear before children


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into `.grad` for every node under `root`.

    `root` must be scalar-valued. Each call adds the full gradient, so two
    calls without `zero_grads` double every gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue  # node does not influence the root
        node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg


def zero_grads(nodes) -> None:
    """Reset gradients on an iterable or mapping of nodes."""
    values = nodes.values() if hasattr(nodes, "values") else nodes
    for node in values:
        node.grad = np.zeros_like(node.value)
