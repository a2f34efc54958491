"""Parameter updates from accumulated gradients: SGD w/ momentum, Adam, linear LR.

Weight decay is coupled (added to the gradient) for both optimizers. The
step counter increments exactly once per update; under micro-batch
streaming that means once per mini-batch, never per micro-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientSet, ParameterSet


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def sgd_state(lr: float = 0.01, momentum: float = 0.9,
              weight_decay: float = 0.0005) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam_state(lr: float = 0.01, weight_decay: float = 0.0005,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, weight_decay=weight_decay,
                          adam_beta1=beta1, adam_beta2=beta2, adam_eps=eps)


def sgd_step(params: ParameterSet, grads: GradientSet, state: OptimizerState) -> None:
    """g' = g + wd*w; v = momentum*v + g'; w -= lr*v. Mutates params and state."""
    grads.validate_against(params)
    for name, grad in grads.items():
        w = params[name].data
        g = grad + state.weight_decay * w if state.weight_decay else grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
            state.velocity[name] = v
        v *= state.momentum
        v += g
        w -= state.lr * v
    state.step_count += 1


def adam_step(params: ParameterSet, grads: GradientSet, state: OptimizerState) -> None:
    """Bias-corrected Adam with weight decay added to the gradient."""
    grads.validate_against(params)
    t = state.step_count + 1
    b1, b2 = state.adam_beta1, state.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, grad in grads.items():
        w = params[name].data
        g = grad + state.weight_decay * w if state.weight_decay else grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
            state.first_moment[name] = m
            state.second_moment[name] = v
        else:
            v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        w -= state.lr * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    state.step_count = t


def apply_update(params: ParameterSet, grads: GradientSet, state: OptimizerState) -> None:
    """One optimizer step; exactly one step_count increment."""
    if state.kind == "sgd":
        sgd_step(params, grads, state)
    else:
        adam_step(params, grads, state)


def linear_lr(initial_lr: float, step: int, total_steps: int) -> float:
    """Linearly decayed learning rate: initial * (1 - step/total); never negative."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, initial_lr * (1.0 - step / total_steps))
