"""Central finite-difference gradient checks for tape-built functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to entries of ``x``.

    ``entries`` restricts the work to those flat indices; the rest stay 0.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size) if entries is None else entries:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """Largest (|a - n| - atol)^+ / max(|a|, |n|) over all entries."""
    if not analytic.size:
        return 0.0
    excess = np.maximum(np.abs(analytic - numeric) - atol, 0.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    return float(np.max(excess / denom))


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    rtol: float = 1e-4,
    h: float = 1e-5,
    atol: float = 1e-8,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``f`` with central differences.

    Returns the worst relative error and raises AssertionError above ``rtol``.
    Differences up to ``atol`` are forgiven: at h=1e-5 the rounding error of
    a central difference is around 1e-11 times the loss scale.  With
    ``sample`` set, only that many randomly chosen entries per tensor are
    differenced.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic_grads(f, params)):
        entries = None
        if sample is not None and p.data.size > sample:
            entries = np.sort(rng.choice(p.data.size, size=sample, replace=False))
        gn = numeric_grad(f, p, h, entries)
        if entries is not None:
            ga, gn = ga.reshape(-1)[entries], gn.reshape(-1)[entries]
        err = max_relative_error(ga, gn, atol)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient mismatch for tensor of shape {p.shape}: rel err {err:.3g} > {rtol}")
    return worst
