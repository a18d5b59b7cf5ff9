"""Shared test oracles: central finite differences and tolerance checks."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` in place.

    ``f`` must recompute the loss from the current contents of ``arr``;
    the array is perturbed one element at a time and restored.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol: float = 1e-4, floor: float = 1e-8, label: str = ""):
    """Elementwise |a-n| <= rtol*max(|a|,|n|) with an absolute floor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape, (label, analytic.shape, numeric.shape)
    err = np.abs(analytic - numeric)
    tol = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    worst = np.max(err - tol)
    assert worst <= 0, f"{label}: gradient mismatch, worst excess {worst:.3e}"
