"""Finite-difference gradient checking used across the test suite."""
import numpy as np

from suturenet import tensorcore as tc

FD_EPS = 1e-5
REL_FLOOR = 1e-7


def numerical_grad(f, arr, eps=FD_EPS):
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic, numeric, floor=REL_FLOOR):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(build, tensors, rng):
    """Compare autodiff and finite-difference gradients of ``sum(build() * R)``.

    ``build`` re-runs the forward pass from the current contents of
    ``tensors``.  Returns the worst relative error over all tensors.
    """
    out = build()
    weights = rng.standard_normal(out.shape)
    for t in tensors:
        t.grad = None
    tc.tensor_sum(tc.mul(out, weights)).backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        return float((build().data * weights).sum())

    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, max_rel_error(a, numerical_grad(f, t.data)))
    return worst


def scalar_gradcheck(build, tensors):
    """Same as :func:`gradcheck` for a scalar-valued ``build``."""
    for t in tensors:
        t.grad = None
    build().backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        return build().item()

    return max(max_rel_error(a, numerical_grad(f, t.data)) for t, a in zip(tensors, analytic))
