"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one Adam update to ``params`` in place and advance ``state``.

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient so that their moments still decay.
    """
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != p.shape:
            if m is not None:
                raise ValueError(f"adam_step: moment shape mismatch for {name!r}")
            m = state.first_moment[name] = np.zeros_like(p)
            v = state.second_moment[name] = np.zeros_like(p)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1 ** t)
        vhat = v / dt(1 - beta2 ** t)
        p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


class Adam:
    """Thin wrapper binding :func:`adam_step` to a named set of tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.for_params({k: t.data for k, t in self.params.items()})

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adam_step({k: t.data for k, t in self.params.items()}, grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)
