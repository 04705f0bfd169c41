"""SGD with Nesterov momentum, Adam, and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd-nesterov"  # or "adam"
    learning_rate: float = 0.1
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # or "cosine"
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd-nesterov", "adam"):
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps < 1:
            raise ConfigurationError("cosine schedule needs total_steps >= 1")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """lr0 * (1 + cos(pi * t / T)) / 2, held at 0 past the horizon."""
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def learning_rate_at(config: OptimizerConfig, step: int) -> float:
    if config.schedule == "cosine":
        return cosine_lr(config.learning_rate, step, config.total_steps)
    return config.learning_rate


class Optimizer:
    """Updates a fixed list of parameters in place from their ``.grad`` buffers."""

    def __init__(self, params, config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.step_index = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params] if config.kind == "adam" else None

    @property
    def lr(self) -> float:
        return learning_rate_at(self.config, self.step_index)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        cfg = self.config
        lr = self.lr
        self.step_index += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "sgd-nesterov":
                buf = self._m[i]
                buf *= cfg.momentum
                buf += g
                update = g + cfg.momentum * buf if cfg.momentum else g
                p.data -= np.asarray(lr, dtype=p.dtype) * update
            else:
                b1, b2 = cfg.betas
                m, v = self._m[i], self._v[i]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** self.step_index)
                vhat = v / (1 - b2 ** self.step_index)
                p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        out = {"step_index": self.step_index, "m": [a.copy() for a in self._m]}
        if self._v is not None:
            out["v"] = [a.copy() for a in self._v]
        return out
