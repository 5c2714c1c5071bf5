from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from tokenmoe.diffcore.params import Parameter


class Adam:
    """Adam with bias correction; ``eps`` is added outside the square root."""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        lr: float = 6.25e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1.5e-4,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset_moments(self, names: Iterable[str]) -> None:
        for k in names:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0


def adam_step(
    params: Mapping[str, Parameter],
    lr: float = 6.25e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1.5e-4,
    t: int = 1,
    state: Adam | None = None,
) -> Adam:
    """Apply one Adam update at step ``t`` and return the optimiser holding the moments."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    opt = state if state is not None else Adam(params, lr, beta1, beta2, eps)
    for k, p in params.items():
        if opt.m[k].shape != p.shape:
            raise ValueError(f"moment shape mismatch for {k}: {opt.m[k].shape} vs {p.shape}")
    opt.t = t - 1
    opt.step()
    return opt
