"""Parameter update rules (SGD, NovoGrad) and the adversarial weight ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Parameter
from .errors import InvalidArgument, NumericError


@dataclass
class OptimizerState:
    """Optimizer kind, hyperparameters, and per-parameter moment buffers.

    NovoGrad keeps one first-moment buffer per parameter and one scalar
    second moment per parameter (the "layer-wise" group is a single named
    tensor). State is keyed by parameter name.
    """

    kind: str = "novograd"
    lr: float = 0.01
    beta1: float = 0.95
    beta2: float = 0.5
    eps: float = 1e-8
    weight_decay: float = 0.001
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, float] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            kind=self.kind, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, weight_decay=self.weight_decay,
            first_moment={k: v.copy() for k, v in self.first_moment.items()},
            second_moment=dict(self.second_moment),
        )


def _check_finite(name: str, grad: np.ndarray) -> None:
    if np.isnan(grad).any():
        raise NumericError(f"NaN gradient for parameter {name!r}")


def sgd_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray],
             mu: float) -> Mapping[str, Parameter]:
    """theta <- theta - mu * g for every supplied gradient, in place.

    Parameters without a gradient entry are untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgument(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if not p.trainable:
            raise InvalidArgument(f"gradient supplied for frozen parameter {name!r}")
        _check_finite(name, g)
        p.data -= mu * g.astype(p.data.dtype, copy=False)
    return params


def novograd_step(state: OptimizerState, params: Mapping[str, Parameter],
                  grads: Mapping[str, np.ndarray]) -> Mapping[str, Parameter]:
    """NovoGrad update with layer-wise second-moment normalization.

    Per named parameter: v <- beta2*v + (1-beta2)*||g||^2 (first step:
    v = ||g||^2), m <- beta1*m + (g/(sqrt(v)+eps) + wd*theta),
    theta <- theta - lr*m.
    """
    if state.kind != "novograd":
        raise InvalidArgument(f"optimizer state kind {state.kind!r} is not novograd")
    for name in grads:
        if name not in params:
            raise InvalidArgument(f"gradient for unknown parameter {name!r}")
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if not p.trainable:
            raise InvalidArgument(f"gradient supplied for frozen parameter {name!r}")
        _check_finite(name, g)
        g = g.astype(np.float64, copy=False)
        sq = float(np.sum(g * g))
        if name in state.second_moment:
            v = state.beta2 * state.second_moment[name] + (1 - state.beta2) * sq
        else:
            v = sq
        state.second_moment[name] = v
        step_dir = g / (math.sqrt(v) + state.eps) + state.weight_decay * p.data
        m = state.first_moment.get(name)
        m = step_dir if m is None else state.beta1 * m + step_dir
        state.first_moment[name] = m
        p.data -= (state.lr * m).astype(p.data.dtype, copy=False)
    return params


def apply_step(state: OptimizerState, params: Mapping[str, Parameter],
               grads: Mapping[str, np.ndarray]) -> None:
    """Dispatch one update through the state's configured rule."""
    if state.kind == "sgd":
        sgd_step(params, grads, state.lr)
    elif state.kind == "novograd":
        novograd_step(state, params, grads)
    else:
        raise InvalidArgument(f"unknown optimizer kind {state.kind!r}")


@dataclass
class LambdaSchedule:
    """Sigmoid ramp of the adversarial weight over training progress."""

    lambda_max: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        if self.lambda_max < 0:
            raise InvalidArgument("lambda_max must be >= 0")
        if self.gamma <= 0:
            raise InvalidArgument("gamma must be > 0")


def lambda_schedule(p: float, schedule: LambdaSchedule) -> float:
    """lambda(p) = lambda_max * (2 / (1 + exp(-gamma * p)) - 1).

    Starts at exactly 0, monotone non-decreasing, saturating at lambda_max.
    """
    if not 0 <= p <= 1:
        raise InvalidArgument(f"progress must be in [0, 1], got {p}")
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0)
