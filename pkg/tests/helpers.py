"""Shared test utilities: the finite-difference gradient oracle.

The oracle only ever calls forward evaluations, so it stays independent of
the backward code paths it is used to check.
"""

import numpy as np


def fd_grad(f, arrays, wrt, h=1e-5):
    """Central finite differences of scalar-valued ``f`` w.r.t. ``arrays[wrt]``.

    ``f`` receives copies of ``arrays`` (plain numpy, float64) and must
    return a python float computed by forward evaluation only.
    """
    work = [a.astype(np.float64).copy() for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target)
    flat_t = target.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_t.size):
        orig = flat_t[j]
        flat_t[j] = orig + h
        fp = f(*work)
        flat_t[j] = orig - h
        fm = f(*work)
        flat_t[j] = orig
        flat_g[j] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b):
    """Max elementwise deviation scaled by the largest magnitude involved."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)
