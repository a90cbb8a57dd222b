"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list:
    """d fn / d arrays[i] by central differences; ``fn`` takes constant Tensors."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = fn(*[Tensor(x) for x in arrays]).item()
            flat[k] = orig - h
            fm = fn(*[Tensor(x) for x in arrays]).item()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    return [g.data for g in grad(fn(*leaves), leaves)]


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    num = numerical_grad(fn, arrays, h)
    ana = analytic_grad(fn, arrays)
    return max(max_rel_error(x, y) for x, y in zip(ana, num))
