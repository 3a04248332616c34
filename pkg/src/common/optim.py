import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from src.common.errors import ShapeError
from src.common.numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments and step count for one parameter tensor."""

    first_moment: Tensor
    second_moment: Tensor
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: Tensor, grad: Tensor, state: AdamState) -> None:
    """Bias-corrected Adam update applied to `param` in place."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ShapeError("adam_step", param.shape, grad.shape)
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """One AdamState per named parameter, created lazily on first update."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> None:
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(param)
            state = self.states.get(name)
            if state is None:
                state = AdamState.zeros_like(
                    param, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
                )
                self.states[name] = state
            adam_step(param, grad, state)
