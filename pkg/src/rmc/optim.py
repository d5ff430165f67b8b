"""Adam with bias correction over named parameter groups."""

from __future__ import annotations

import numpy as np

from .autodiff import Gradients, Tensor


class NonFiniteGradError(ArithmeticError):
    """Raised when a gradient contains NaN or infinity."""


class Adam:
    """Adam state for one parameter group.

    ``step`` writes fresh arrays into each tensor's ``data`` instead of
    mutating in place, so closures recorded on an earlier tape keep seeing
    the values they were created with.
    """

    def __init__(
        self,
        name: str,
        params: list[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.name = name
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Gradients) -> None:
        """Apply one update from ``grads``; unreachable parameters see zero."""
        self.count += 1
        bc1 = 1.0 - self.beta1 ** self.count
        bc2 = 1.0 - self.beta2 ** self.count
        for i, p in enumerate(self.params):
            g = grads.wrt(p)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(
                    f"non-finite gradient in group '{self.name}' (parameter {i}, shape {p.data.shape})"
                )
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
