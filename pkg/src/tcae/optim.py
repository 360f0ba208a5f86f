"""AdamW with linear warmup + cosine decay, and the EMA teacher update."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.04
    warmup_epochs: int = 5
    schedule: str = "cosine"
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.base_lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be nonnegative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# joint training and decoder-finetune optimizer settings
JOINT_TRAINING = OptimizerConfig(1e-3, 1e-6, (0.9, 0.95), 0.04, 5)
DECODER_FINETUNE = OptimizerConfig(2e-4, 2e-5, (0.9, 0.95), 0.0, 1)


@dataclass
class Schedule:
    """Step-level view of an OptimizerConfig for a known run length."""

    config: OptimizerConfig
    steps_per_epoch: int
    total_steps: int
    warmup_steps: int = field(init=False)

    def __post_init__(self):
        self.warmup_steps = min(self.config.warmup_epochs * self.steps_per_epoch,
                                self.total_steps)

    def lr(self, step: int) -> float:
        c = self.config
        if step < self.warmup_steps:
            return c.base_lr * (step + 1) / self.warmup_steps
        if c.schedule == "constant":
            return c.base_lr
        span = max(self.total_steps - self.warmup_steps, 1)
        prog = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return c.min_lr + 0.5 * (c.base_lr - c.min_lr) * (1.0 + math.cos(math.pi * prog))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= s
    return total


def adamw_step(params: Iterable[Parameter], config: OptimizerConfig, step_index: int,
               lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update; ``step_index`` is 0-based.

    ``lr`` overrides the scheduled value (callers usually pass ``Schedule.lr``).
    """
    b1, b2 = config.betas
    t = step_index + 1
    lr = config.base_lr if lr is None else lr
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        if config.weight_decay and p.decay:
            p.data *= 1.0 - lr * config.weight_decay
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.data.dtype)


def ema_update(teacher: Sequence[Parameter], student: Sequence[Parameter],
               momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, matched by name."""
    if len(teacher) != len(student):
        raise ValueError("teacher and student parameter counts differ")
    for t, s in zip(teacher, student):
        if t.name != s.name or t.shape != s.shape:
            raise ValueError(f"EMA mismatch: {t.name}{t.shape} vs {s.name}{s.shape}")
        t.data[...] = momentum * t.data + (1.0 - momentum) * s.data


def cosine_momentum(step: int, total_steps: int, start: float = 0.996,
                    end: float = 1.0) -> float:
    if total_steps <= 1:
        return end
    prog = min(step / (total_steps - 1), 1.0)
    return end - (end - start) * (math.cos(math.pi * prog) + 1.0) / 2.0
