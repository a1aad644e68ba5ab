"""L1 loss, Adam with decoupled weight decay, and cosine learning-rate annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    target = T.as_tensor(target, pred)
    if pred.size == 0:
        raise ContractError("l1_loss on empty input")
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return T.mean(T.abs_(pred - target))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ConfigError("cosine_lr needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> AdamState:
    """One in-place Adam update of every parameter in ``params`` holding a gradient.

    Weight decay is decoupled (applied to the weights before the Adam step).
    Parameters with ``requires_grad`` unset are never touched.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        data = p.data
        if cfg.weight_decay:
            data = data - dt(lr * cfg.weight_decay) * data
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data = np.ascontiguousarray(data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(cfg.adam_eps)))
    return state
