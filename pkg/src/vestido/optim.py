"""Adam optimizer over named parameter sets."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from vestido.errors import ConfigurationError, MissingGradientError
from vestido.tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for Adam.

    Attributes:
        lr: Step size
        beta1: Decay of the first-moment estimate
        beta2: Decay of the second-moment estimate
        eps: Denominator floor
        t: Number of steps taken so far
        m: First-moment buffer per parameter name
        v: Second-moment buffer per parameter name
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError(f"Adam lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(
                f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})"
            )
        if self.eps <= 0:
            raise ConfigurationError(f"Adam eps must be positive, got {self.eps}")

    def hyperparameters(self) -> dict[str, float | int]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }


def adam_step(params: Iterable[tuple[str, Tensor]], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients are left untouched; the caller resets them.

    Raises:
        MissingGradientError: If any parameter has no gradient
    """
    params = list(params)
    for name, param in params:
        if param.grad is None:
            raise MissingGradientError(f"Parameter '{name}' has no gradient")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params:
        grad = param.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)


class Adam:
    """Adam bound to a fixed list of named parameters.

    Args:
        params: (name, parameter) pairs, typically `module.named_parameters()`
        lr: Step size
        betas: (beta1, beta2)
        eps: Denominator floor
    """

    def __init__(
        self,
        params: Iterable[tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
