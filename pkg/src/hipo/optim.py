"""AdamW with bias correction and decoupled weight decay.

Moments are float64; parameter updates are computed in float64 and rounded
back to the float32 master weights. Deterministic: no RNG, fixed tensor
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientMap
from .model import ModelParams


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite gradient for '{name}' at optimizer step {step}")
        self.step = step
        self.name = name


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    config: AdamWConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: ModelParams, config: AdamWConfig | None = None) -> "AdamWState":
        config = config or AdamWConfig()
        return cls(
            config=config,
            m={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
            v={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
        )


def clip_grad_norm(grads: GradientMap, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adamw_step(
    params: ModelParams, grads: GradientMap, state: AdamWState, lr: float
) -> tuple[ModelParams, AdamWState]:
    """One decoupled-weight-decay Adam update, in place on `params`."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    cfg = state.config
    next_step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(next_step, name)
    state.step = next_step
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, tensor in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p64 = tensor.astype(np.float64)
        p64 -= lr * update
        if cfg.weight_decay != 0.0:
            p64 -= lr * cfg.weight_decay * tensor.astype(np.float64)
        params.tensors[name] = p64.astype(np.float32)
    return params, state
