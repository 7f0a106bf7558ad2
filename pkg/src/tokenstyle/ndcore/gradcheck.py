"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _scalar(out) -> float:
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(value):
        raise NumericError("grad_check: objective is not finite")
    return value


def grad_check_many(f, tensors, h: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f()`` must rebuild the graph from ``tensors`` on every call. With
    ``max_entries`` only that many randomly chosen coordinates per tensor are
    perturbed.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.grad = None
    out = f()
    _scalar(out)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(ga.reshape(-1)[coords], numeric))
    for t in tensors:
        t.grad = None
    return worst


def grad_check(f, x: Tensor, h: float = 1e-4) -> float:
    """``f`` maps a Tensor to a scalar Tensor; ``x`` must be float64."""
    x.requires_grad = True
    return grad_check_many(lambda: f(x), [x], h)
