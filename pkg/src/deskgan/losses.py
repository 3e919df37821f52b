"""Hinge adversarial losses and Adam with two-timescale configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TTURConfig:
    """Imbalanced learning rates: the discriminator learns 4× faster so 1:1
    update ratios suffice."""

    lr_g: float = 0.0001
    lr_d: float = 0.0004
    d_steps_per_g_step: int = 1

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0 or self.d_steps_per_g_step <= 0:
            raise ValueError(f"TTUR settings must be positive: {self}")

    @staticmethod
    def equal_rates(lr: float = 0.0002) -> "TTURConfig":
        return TTURConfig(lr_g=lr, lr_d=lr)


def hinge_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean(relu(1 − d_real)) + mean(relu(1 + d_fake)).

    Zero exactly when every real score clears +1 and every fake score sits
    below −1; subgradient is −1/B (resp. +1/B) inside the margin and 0
    outside.
    """
    one = Tensor(np.asarray(1.0, dtype=d_real.dtype))
    return T.tmean(T.relu(one - d_real)) + T.tmean(T.relu(one + d_fake))


def hinge_g_loss(d_fake: Tensor) -> Tensor:
    """−mean(d_fake): unbounded and linear in the fake scores."""
    return T.neg(T.tmean(d_fake))


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'; step aborted")
        self.name = name


class Adam:
    """Adam with bias correction over a named parameter group.

    With beta1 = 0 the first moment is just the current gradient (the
    correction is then a no-op but kept for exactness against the standard
    formula).  A non-finite gradient aborts the whole step, naming the
    parameter, before any parameter is touched.
    """

    def __init__(self, named_params, lr: float, beta1: float = 0.0, beta2: float = 0.9,
                 eps: float = 1e-8):
        self.params: list[tuple[str, Tensor]] = list(
            named_params.items() if isinstance(named_params, dict) else named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.asarray([self.t], dtype=np.int64)}
        for name, _ in self.params:
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}t"][0])
        for name, _ in self.params:
            self.m[name][...] = arrays[f"{prefix}m/{name}"]
            self.v[name][...] = arrays[f"{prefix}v/{name}"]
