"""Central finite-difference checking of autodiff gradients."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """||a - n|| / max(||a||, ||n||).

    Below ``floor`` both gradients are within finite-difference roundoff of zero,
    so the absolute difference is returned instead.
    """
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(diff)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4) -> float:
    """Largest relative error over ``tensors`` between backprop and finite differences.

    ``fn`` must rebuild the graph from the current tensor values and return a
    scalar.  Tensors should be float64 for meaningful comparisons.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
