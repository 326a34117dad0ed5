from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``t.data``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps parameters with a true gradient of zero (a bias feeding
    batch norm, say) from scoring 1.0 on round-off noise.
    """
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    With ``max_entries`` only that many randomly chosen coordinates per input
    are probed, which keeps checks on large hypernetworks affordable.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if max_entries is None or t.size <= max_entries:
            numeric = numeric_grad(fn, t, step)
            worst = max(worst, relative_error(analytic, numeric))
            continue
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(t.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        num = np.empty(max_entries)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            num[j] = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], num))
    for t in inputs:
        t.grad = None
    return worst
