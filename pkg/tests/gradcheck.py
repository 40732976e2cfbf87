"""Finite-difference helpers shared by the gradient tests."""

import numpy as np


def numerical_grad(f, arr, h=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, restored)."""
    idxs = [index] if index is not None else list(np.ndindex(arr.shape))
    out = np.zeros(arr.shape)
    for i in idxs:
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))
