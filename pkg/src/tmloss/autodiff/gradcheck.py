"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from tmloss.autodiff.tensor import Tensor, checked, no_grad
from tmloss.errors import NumericalError

# Denominator floor for the relative error. Central differences at eps=1e-5
# in float64 carry ~1e-11*|f| of rounding noise (|f| reaches ~50 with s=64
# margin logits), so gradient entries below the floor are compared in
# absolute terms instead. 1e-4 leaves a 30x margin on the bundled suite.
DEFAULT_FLOOR = 1e-4


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   indices: Optional[np.ndarray] = None) -> np.ndarray:
    """(f(x+eps) - f(x-eps)) / 2eps for each (selected) flat element of ``x``."""
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("numerical_grad needs a contiguous tensor")
    grad = np.full(flat.shape, np.nan)
    idx = np.arange(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f().data)
            flat[i] = orig - eps
            minus = float(f().data)
            flat[i] = orig
            grad[i] = (plus - minus) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               floor: float = DEFAULT_FLOOR, max_elements: Optional[int] = None,
               seed: int = 0) -> float:
    """Worst relative error between backward-pass and finite-difference gradients.

    ``f`` is called as ``f(*inputs)`` and must return a scalar tensor. All
    inputs must be float64 and will be differentiated. ``max_elements``
    limits the finite-difference probe to a seeded random subset of each
    input (the analytic gradient is always complete).

    Raises :class:`NumericalError` naming the offending operation if any
    evaluation produces a non-finite value.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 inputs, got {t.dtype}")
        t.requires_grad = True
        t.grad = None

    with checked():
        try:
            out = f(*inputs)
        except NumericalError as exc:
            raise NumericalError(f"grad_check forward pass: {exc}") from exc
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        indices = None
        if max_elements is not None and t.size > max_elements:
            indices = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        with checked():
            n = numerical_grad(lambda: f(*inputs), t, eps=eps, indices=indices)
        sel = ~np.isnan(n)
        if sel.any():
            worst = np.maximum(worst, relative_error(a[sel], n[sel], floor).max())
    return float(worst)
