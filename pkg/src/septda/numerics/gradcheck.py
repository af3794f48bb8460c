"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference relative to the larger of the two magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to entries of ``t``."""
    grad = np.zeros_like(t.data)
    if indices is None:
        indices = list(np.ndindex(t.shape))
    for idx in indices:
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = fn().item()
        t.data[idx] = orig - h
        fm = fn().item()
        t.data[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backprop against central differences; returns the worst relative error.

    The error is the largest absolute discrepancy over every probed entry divided
    by the largest gradient magnitude seen across all tensors, so a gradient that
    is structurally zero (a key bias under softmax, say) is judged against the
    scale of the others rather than against its own round-off.  Every tensor must
    be float64.  With ``max_entries`` only that many randomly chosen entries per
    tensor are probed.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks must run in double precision")
        t.grad = None
    out = fn()
    out.backward()
    rng = rng or np.random.default_rng(0)
    analytic_all, numeric_all = [], []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in pick]
        else:
            idx = all_idx
        numeric = numeric_grad(fn, t, h, idx)
        analytic_all.extend(analytic[i] for i in idx)
        numeric_all.extend(numeric[i] for i in idx)
    return max_relative_error(np.array(analytic_all), np.array(numeric_all))
