"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def _scalarize(out: Tensor, projection: Optional[np.ndarray]) -> Tensor:
    if out.data.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
               max_checks: Optional[int] = None, seed: int = 0,
               wrt: Optional[Sequence[int]] = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps tensors (one per entry of ``inputs``) to a tensor. Non-scalar
    outputs are reduced with a fixed random projection so every output element
    contributes. All arithmetic runs in float64.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor`` is 1e-3 of the largest numerical gradient magnitude, so entries
    that are essentially zero do not dominate the result.

    ``max_checks`` caps how many coordinates per input are perturbed (chosen
    with ``seed``); ``wrt`` restricts which inputs are checked.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = np.random.default_rng(seed)

    probe = fn(*[Tensor(a) for a in arrays])
    projection = None
    if probe.data.size != 1:
        projection = rng.standard_normal(probe.shape)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    _scalarize(fn(*tensors), projection).backward()

    def value() -> float:
        return float(_scalarize(fn(*[Tensor(a) for a in arrays]), projection).data)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        numeric = np.empty(coords.size)
        for k, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = value()
            flat[c] = orig - eps
            down = value()
            flat[c] = orig
            numeric[k] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[coords]
        floor = max(1e-3 * np.abs(numeric).max(initial=0.0), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom, initial=0.0)))
    return worst
