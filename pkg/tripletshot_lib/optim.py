"""
Adam with bias correction and the step-halving learning-rate schedule.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor
from .exceptions import ContractError, NumericError, ShapeError

INITIAL_LR = 1e-4
LR_HALVING_PERIOD = 10000


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_parameters(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def check_shapes(self, params: Mapping[str, Tensor]) -> None:
        if set(self.m) != set(params) or set(self.v) != set(params):
            raise ShapeError("optimizer state does not cover the same parameters as the model")
        for name, p in params.items():
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ShapeError(f"optimizer moments for {name} do not match its shape {p.shape}")


def lr_schedule(iteration: int, initial_lr: float = INITIAL_LR, period: int = LR_HALVING_PERIOD) -> float:
    """initial_lr * 0.5 ** floor(iteration / period)."""
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    return initial_lr * 0.5 ** (iteration // period)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, iteration: int = None) -> AdamState:
    """
    One Adam update of every parameter from its ``grad`` (a missing grad
    counts as zero). All gradients are checked before anything is modified,
    so a non-finite gradient leaves parameters and state untouched.
    """
    if not lr > 0:
        raise ContractError(f"learning rate must be > 0, got {lr}")
    state.check_shapes(params)
    for name, p in params.items():
        if p.grad is not None:
            if p.grad.shape != p.shape:
                raise ShapeError(f"gradient of {name} has shape {p.grad.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError("non-finite gradient", parameter=name, iteration=iteration)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data[...] -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return state
