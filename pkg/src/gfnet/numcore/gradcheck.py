"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, tensor: Tensor, eps: float = 1e-3, indices=None) -> np.ndarray:
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor.

    Only the flat ``indices`` are perturbed (all of them by default); other
    entries of the returned array stay zero.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(tensor.shape)


def analytic_grads(fn, tensors) -> list:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a| + |n|, floor) elementwise (symmetric relative error)."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, tensors, eps: float = 1e-3, indices=None) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    analytic = analytic_grads(fn, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        sel = None if indices is None else indices(t)
        n = numerical_grad(fn, t, eps, sel)
        if sel is not None:
            mask = np.zeros(t.size, dtype=bool)
            mask[list(sel)] = True
            a, n = a.reshape(-1)[mask], n.reshape(-1)[mask]
        worst = max(worst, max_relative_error(a, n))
    return worst
