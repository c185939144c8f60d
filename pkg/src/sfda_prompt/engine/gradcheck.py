"""Central-difference gradient verification."""
import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn, x, step=1e-6):
    """Central differences of scalar ``fn(Tensor)`` w.r.t. every entry of ``x``."""
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn(Tensor(base.copy())).data)
        flat[i] = orig - step
        minus = float(fn(Tensor(base.copy())).data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return out.reshape(base.shape)


def analytic_grad(fn, x):
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(fn(t))
    return t.grad


def grad_check(fn, x, step=1e-6, analytic=None):
    """Max elementwise relative error between analytic and numeric gradients.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``. Pass
    ``analytic`` to check a gradient computed elsewhere.
    """
    x = x.data if isinstance(x, Tensor) else x
    if analytic is None:
        analytic = analytic_grad(fn, x)
    numeric = numerical_grad(fn, x, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
