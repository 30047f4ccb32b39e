"""Momentum SGD with L2 weight decay and step-wise learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Parameter


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class SgdConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 0.0007
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def sgd_step(params: Iterable[Parameter], config: SgdConfig, epoch: int = 0) -> None:
    """One momentum step over ``params``.

    ``v <- momentum * v - lr(epoch) * (grad + weight_decay * value)``, then
    ``value <- value + v``.  Nothing is updated if any gradient is non-finite.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name!r}")
    lr = config.lr_at(epoch)
    for p in params:
        g = p.grad + config.weight_decay * p.data if config.weight_decay else p.grad
        v = p.momentum_buffer
        v *= config.momentum
        v -= lr * g
        p.data += v
