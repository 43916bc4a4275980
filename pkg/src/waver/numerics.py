"""Dense linear algebra with a small reverse-mode autodiff tape.

Plain ``numpy`` arrays go in and out of the helper functions; when a
:class:`Tensor` is passed instead, the result is a ``Tensor`` that records how
it was produced so :func:`backward` can differentiate a scalar loss.
"""

import numpy as np

from .exceptions import DimensionMismatch, EmptyInput, NotScalar, ZeroNorm

ZERO_NORM_EPS = 1e-12


class Tensor:
    """A float64 array node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- differentiable primitives ------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _node(a.data.T, (a,), lambda g: (g.T,))


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def sum_(a, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def diagonal(a):
    n = min(a.shape)

    def back(g):
        full = np.zeros(a.shape)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _node(np.diagonal(a.data).copy(), (a,), back)


def concat_rows(tensors):
    """Stack 1-D or 2-D tensors vertically into one matrix."""
    parts = [_as_tensor(t) for t in tensors]
    blocks = [np.atleast_2d(p.data) for p in parts]
    sizes = [b.shape[0] for b in blocks]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            g[lo:hi].reshape(p.shape) for p, lo, hi in zip(parts, offsets[:-1], offsets[1:])
        )

    return _node(np.vstack(blocks), tuple(parts), back)


def logsumexp_rows(a):
    """Row-wise log-sum-exp, returned as a vector."""
    m = a.data.max(axis=1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = (m + np.log(total))[:, 0]
    return _node(out, (a,), lambda g: (g[:, None] * shifted / total,))


def _softmax_array(x):
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _row_norms(x):
    norms = np.sqrt((x * x).sum(axis=1))
    bad = np.flatnonzero(norms < ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNorm(f"row {bad[0]} has norm below {ZERO_NORM_EPS:g}", row=int(bad[0]))
    return norms


# -- public helpers (array in -> array out, Tensor in -> Tensor out) ----------


def _check_matrix(m, name):
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionMismatch(f"{name}: expected a 2-D matrix, got shape {data.shape}")
    return data


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction."""
    data = _check_matrix(m, "softmax_rows")
    out = _softmax_array(data)
    if not isinstance(m, Tensor):
        return out

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (m,), back)


def l2_normalize_rows(m):
    """Scale every row to unit Euclidean norm.

    Raises :class:`ZeroNorm` naming the first row whose norm is below 1e-12.
    """
    data = _check_matrix(m, "l2_normalize_rows")
    norms = _row_norms(data)[:, None]
    out = data / norms
    if not isinstance(m, Tensor):
        return out

    def back(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _node(out, (m,), back)


def mean_pool_rows(m):
    """Column means of an N x D matrix (the global embedding of N frames)."""
    data = _check_matrix(m, "mean_pool_rows")
    if data.shape[0] == 0:
        raise EmptyInput("mean_pool_rows: matrix has no rows")
    if isinstance(m, Tensor):
        return mean(m, axis=0)
    return data.mean(axis=0)


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine_similarity: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroNorm("cosine_similarity: zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = _check_matrix(a, "cosine_matrix")
    b = _check_matrix(b, "cosine_matrix")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"cosine_matrix: dims {a.shape[1]} and {b.shape[1]} differ")
    return np.clip(l2_normalize_rows(a) @ l2_normalize_rows(b).T, -1.0, 1.0)


# -- reverse pass --------------------------------------------------------------


def _topological(root):
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
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=()):
    """Differentiate a scalar ``loss`` and return one gradient per parameter.

    Gradients are also left on ``param.grad``. Parameters the loss does not
    depend on receive zeros.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    grads[id(node), "leaf"] = g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    out = []
    for p in params:
        g = grads.get((id(p), "leaf"))
        if g is None and p is loss:
            g = np.ones_like(p.data)
        g = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
        p.grad = g
        out.append(g)
    return out
