"""Named parameters and a decoupled-weight-decay Adam optimizer.

The learning-rate schedule is linear warmup to ``lr_peak`` followed by linear
decay to zero at ``total_steps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-9
    weight_decay: float = 0.1

    def validate(self) -> None:
        if not (0.0 < self.beta1 < self.beta2 < 1.0):
            raise ConfigurationError(
                f"betas must satisfy 0 < beta1 < beta2 < 1, got ({self.beta1}, {self.beta2})"
            )
        if self.eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})"
            )


class Parameter:
    """A trainable tensor with a unique name path and Adam moment buffers."""

    __slots__ = ("name", "value", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value: Tensor):
        value.requires_grad = True
        self.name = name
        self.value = value
        self.adam_m = np.zeros_like(value.data)
        self.adam_v = np.zeros_like(value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def lr_at(config: OptimizerConfig, step: int) -> float:
    """Learning rate at 1-based optimizer step ``step``."""
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.lr_peak * step / config.warmup_steps
    decay_span = config.total_steps - config.warmup_steps
    if decay_span <= 0:
        return 0.0
    remaining = max(config.total_steps - step, 0)
    return config.lr_peak * remaining / decay_span


def adamw_step(params: list[Parameter], config: OptimizerConfig, step: int) -> float:
    """Apply one AdamW update (bias-corrected moments, decoupled decay).

    Missing gradients are treated as zero. Returns the learning rate used.
    """
    lr = lr_at(config, step)
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**step
    bias2 = 1.0 - b2**step
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        m_hat = p.adam_m / bias1
        v_hat = p.adam_v / bias2
        if config.weight_decay != 0.0:
            p.value.data -= (lr * config.weight_decay) * p.value.data
        p.value.data -= lr * (m_hat / (np.sqrt(v_hat) + config.eps))
        p.step_count = step
    return lr


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm (accumulated in float64).
    """
    total = 0.0
    for p in params:
        if p.value.grad is not None:
            g = p.value.grad
            total += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.value.grad is not None:
                p.value.grad *= scale
    return norm
