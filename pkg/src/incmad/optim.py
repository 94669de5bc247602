"""Stochastic gradient descent with classical momentum.

The update is the standard velocity form:

    v <- mu * v + g
    p <- p - lr * v

exposed both as a pure function on arrays (used by unit tests against the
worked example) and as a stateful optimizer over Tensor parameters whose
velocity buffers can be serialized and restored across training phases.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["sgd_step", "SGD"]


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One momentum SGD update on raw arrays; returns (new_param, new_velocity)."""
    new_velocity = momentum * velocity + grad
    new_param = param - lr * new_velocity
    return new_param, new_velocity


class SGD:
    """Momentum SGD over a named, ordered parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        momentum: float = 0.9,
        clip_norm: float | None = None,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip_norm = None if clip_norm is None else float(clip_norm)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            sq = sum(
                float(np.sum(p.grad * p.grad))
                for p in self.params.values()
                if p.grad is not None
            )
            total = np.sqrt(sq)
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.velocity[name] = sgd_step(
                p.data, scale * p.grad, self.velocity[name], self.lr, self.momentum
            )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in self.params:
            if name in state:
                if state[name].shape != self.velocity[name].shape:
                    raise ValueError(f"velocity shape mismatch for {name}")
                self.velocity[name] = state[name].astype(np.float64).copy()

    def reset_state(self) -> None:
        for name in self.velocity:
            self.velocity[name] = np.zeros_like(self.velocity[name])
