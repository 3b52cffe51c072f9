"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients record a node (parents plus a backward rule) so that
:func:`backward` can push the gradient of a scalar loss back to every leaf.

Gradients land on leaves only.  A leaf whose ``grad`` is still populated from a
previous backward pass makes the next pass fail; call :func:`zero_grad` (or the
optimizer's ``zero_grad``) between steps.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _check_finite(values, op):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return values


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic protocol --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operator sugar --------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _check_finite(a.data / b.data, "div")

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = _check_finite(a.data ** p, "pow")

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bw, "pow")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and numerics
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def logsumexp(v, axis=-1, keepdims=False):
    """Stable ``log(sum(exp(v)))`` along ``axis`` using max subtraction."""
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty axis")
    m = np.max(v.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(v.data - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = np.exp(v.data - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (v,), bw, "logsumexp")


def log_softmax(v, axis=-1):
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] < 1:
        raise ShapeError("log_softmax needs a non-empty class axis")
    m = np.max(v.data, axis=axis, keepdims=True)
    shifted = v.data - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    soft = np.exp(out)

    def bw(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (v,), bw, "log_softmax")


def softmax(v, axis=-1):
    return exp(log_softmax(v, axis))


def l2_normalize(h, axis=-1, min_norm=1e-12):
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    h = as_tensor(h)
    norm = np.sqrt(np.sum(h.data * h.data, axis=axis, keepdims=True))
    if np.any(norm < min_norm):
        raise ValueError("cannot normalize a zero vector")
    out = h.data / norm

    def bw(g):
        return ((g - out * np.sum(out * g, axis=axis, keepdims=True)) / norm,)

    return _make(out, (h,), bw, "l2_normalize")


def sqdist(a, b):
    """Squared Euclidean distances between rows of ``a`` (n, d) and ``b`` (m, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        return kernels.sqdist_grad(a.data, b.data, g)

    return _make(kernels.sqdist(a.data, b.data), (a, b), bw, "sqdist")


def pairwise_kl(mu, logvar):
    """Matrix of KL(N_i || N_j) between diagonal Gaussians given as rows."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape or mu.ndim != 2:
        raise ShapeError(f"pairwise_kl expects matching (N, d) inputs, got {mu.shape}, {logvar.shape}")
    out = _check_finite(kernels.pairwise_kl(mu.data, logvar.data), "pairwise_kl")

    def bw(g):
        return kernels.pairwise_kl_grad(mu.data, logvar.data, g)

    return _make(out, (mu, logvar), bw, "pairwise_kl")


def gauss_logpdf(z, mu, logvar):
    """Log-density of each row of ``z`` (L, d) under each diagonal Gaussian row (N, d)."""
    z, mu, logvar = as_tensor(z), as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape or z.ndim != 2 or mu.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ShapeError(f"gauss_logpdf shape mismatch: z {z.shape}, mu {mu.shape}, logvar {logvar.shape}")
    out = _check_finite(kernels.gauss_logpdf(z.data, mu.data, logvar.data), "gauss_logpdf")

    def bw(g):
        return kernels.gauss_logpdf_grad(z.data, mu.data, logvar.data, g)

    return _make(out, (z, mu, logvar), bw, "gauss_logpdf")


def cross_entropy(log_probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under row log-probs."""
    labels = np.asarray(labels, dtype=np.intp)
    picked = getitem(log_probs, (np.arange(len(labels)), labels))
    return -mean(picked)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every tracked leaf reachable from scalar ``loss``.

    Returns a dict mapping each leaf tensor to its gradient array.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from any tensor that requires grad")

    order = _topo_order(loss)
    leaves = [n for n in order if n.is_leaf]
    for leaf in leaves:
        if leaf.grad is not None:
            raise GradientError("leaf already holds a gradient; reset with zero_grad before backward")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    result = {}
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        result[leaf] = leaf.grad
    return result


def zero_grad(params):
    for p in params:
        p.grad = None
