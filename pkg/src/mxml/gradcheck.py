"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` wrt every input array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                hi = float(fn(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig - eps
            with no_grad():
                lo = float(fn(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    return [leaf.grad for leaf in leaves]


def relative_error(analytic, numeric, floor=1e-6):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_gradients(fn, arrays, eps=1e-5):
    """Return the relative error between backprop and finite differences."""
    return relative_error(analytic_grad(fn, arrays), numerical_grad(fn, arrays, eps))
