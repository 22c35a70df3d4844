"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f, t: Tensor, eps: float = 1e-4, indices=None) -> np.ndarray:
    """Central-difference estimate of d f() / d t.

    ``f`` is a zero-argument callable that rebuilds the graph from the
    current contents of ``t.data`` and returns a scalar tensor. When
    ``indices`` is given only those flat positions are probed (others stay
    zero).
    """
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    for k in probe:
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f().data)
        flat[k] = orig - eps
        fm = float(f().data)
        flat[k] = orig
        grad[k] = (fp - fm) / (2 * eps)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|), 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_gradients(f, tensors, eps: float = 1e-4, max_probes: int | None = None, seed: int = 0) -> dict:
    """Compare analytic and numerical gradients for each tensor in ``tensors``.

    Returns ``{name_or_index: relative_error}``. With ``max_probes`` only a
    random subset of entries per tensor is probed; the error is computed on
    that subset.
    """
    rng = np.random.default_rng(seed)
    grads = backward(f())
    errors = {}
    for k, t in enumerate(tensors):
        analytic = grads.get(t, np.zeros(t.shape))
        idx = None
        if max_probes is not None and t.numel > max_probes:
            idx = np.sort(rng.choice(t.numel, size=max_probes, replace=False))
        numeric = numerical_grad(f, t, eps, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors[t.name or k] = relative_error(analytic, numeric)
    return errors
