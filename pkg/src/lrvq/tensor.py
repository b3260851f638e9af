"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; when gradient tracking is on
and at least one input requires a gradient, the result records its parents
and a closure that maps the output gradient to one gradient per parent.
Tensors are never mutated in place while they take part in a live graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare python scalars take the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype if isinstance(b, (int, float)) else None)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype if isinstance(a, (int, float)) else None), b
    return as_tensor(a), as_tensor(b)


def _check_finite(arr: np.ndarray, op: str):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by op '{op}' (shape {arr.shape})")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _shape_error(op: str, a: Tensor, b: Tensor, detail: str = "") -> ValueError:
    msg = f"{op}: incompatible shapes {a.shape} and {b.shape}"
    return ValueError(msg + (f" ({detail})" if detail else ""))


def _binary_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    if exponent == 2:
        def bw(g):
            return (g * 2.0 * ad,)

        return _node(ad * ad, (a,), bw, "power")

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return _node(ad**exponent, (a,), bw, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g / ad,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node(out, (a,), bw, "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g * (ad > 0),)

    return _node(np.maximum(ad, 0), (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _node(out, (a,), bw, "gelu")


def stop_gradient(a) -> Tensor:
    """Forward identity; contributes no gradient to ``a``."""
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.op = "stop_gradient"
    out._parents = ()
    out._backward = None
    return out


def straight_through(z, z_q) -> Tensor:
    """Return a tensor whose value is ``z_q`` and whose gradient flows to ``z``.

    Equivalent to ``z + stop_gradient(z_q - z)`` but without the rounding that
    expression introduces in the forward value.
    """
    z, z_q = as_tensor(z), as_tensor(z_q)
    if z.shape != z_q.shape:
        raise _shape_error("straight_through", z, z_q)

    def bw(g):
        return (g,)

    return _node(z_q.data.copy(), (z,), bw, "straight_through")


# -- reductions and shape ops -------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(src),)

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, bw, "concat")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        return (_unbroadcast(g, src),)

    return _node(np.broadcast_to(a.data, shape), (a,), bw, "broadcast_to")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul", a, b, "operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b, "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise _shape_error("matmul", a, b, "batch dimensions do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # one GEMM instead of a batch of small ones
        K = ad.shape[-1]
        out = (ad.reshape(-1, K) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, K).T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _node(ad @ bd, (a, b), bw, "matmul")


def gather_rows(table, index: np.ndarray) -> Tensor:
    """Select rows of ``table[..., C, D]`` by integer ``index[..., T]``.

    Leading dimensions of ``table`` broadcast against those of ``index``.
    The forward value is an exact copy of the selected rows.
    """
    table = as_tensor(table)
    index = np.asarray(index)
    if table.ndim < 2:
        raise ValueError(f"gather_rows: table needs at least 2 dims, got {table.shape}")
    C, D = table.shape[-2:]
    if index.size and (index.min() < 0 or index.max() >= C):
        raise IndexError(f"gather_rows: index out of range for {C} rows")
    lead = np.broadcast_shapes(table.shape[:-2], index.shape[:-1])
    tb = np.broadcast_to(table.data, lead + (C, D))
    ib = np.broadcast_to(index, lead + index.shape[-1:])
    out = np.take_along_axis(tb, ib[..., None], axis=-2)
    tshape = table.shape

    def bw(g):
        onehot = (ib[..., :, None] == np.arange(C)).astype(g.dtype)
        return (_unbroadcast(np.swapaxes(onehot, -1, -2) @ g, tshape),)

    return _node(out, (table,), bw, "gather_rows")


# -- normalization and probability ops --------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise _shape_error("layer_norm", x, gamma, "affine params must match last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def bw(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale each slice along ``axis`` to unit l2 norm; zero slices stay zero."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    out = np.where(nz, xd / safe, 0.0)

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(nz, (g - out * proj) / safe, 0.0),)

    return _node(out, (x,), bw, "l2_normalize")


def mse(a, b) -> Tensor:
    """Mean of squared differences over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _node(np.asarray((diff * diff).mean()), (a, b), bw, "mse")


def scaled_dot_product_attention(q, k, v, bias=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + bias) v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise _shape_error("attention", q, k, "query/key widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise _shape_error("attention", k, v, "key/value lengths differ")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return matmul(softmax(scores, axis=-1), v)


# -- backward ----------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires one,
    and the same leaf gradients are returned as a mapping.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        g = np.array(g, dtype=leaf.dtype)
        _check_finite(g, f"backward into {leaf.name or 'leaf'}")
        leaves[leaf] = g
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return leaves
