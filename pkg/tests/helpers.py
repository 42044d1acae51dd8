"""Shared oracles for the test suite."""

import numpy as np


def finite_difference(loss_fn, tensors, eps: float = 1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each tensor.

    ``loss_fn`` must recompute the loss from the tensors' current data on
    every call, so it stays independent of the autodiff path it checks.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, scale: float = 1.0) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
