"""Adam with decoupled weight decay, global-norm clipping and the SGDR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


class Adam:
    """Adam with decoupled weight decay: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).

    Parameters whose ``grad`` is ``None`` are treated as having zero gradient.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter of shape {p.shape}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m.{i:04d}"] = m
            out[f"{prefix}.v.{i:04d}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.step_count = int(arrays[f"{prefix}.step"][0])
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            m[...] = arrays[f"{prefix}.m.{i:04d}"]
            v[...] = arrays[f"{prefix}.v.{i:04d}"]


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass(frozen=True)
class ScheduleConfig:
    cycle_epochs: float = 4.0
    lr_max: float = 1e-5
    lr_min: float = 1e-8
    decay: float = 1.0
    num_cycles: int = 1

    def __post_init__(self):
        if self.cycle_epochs <= 0:
            raise ConfigError("cycle_epochs must be positive")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")
        if self.num_cycles < 1 or self.decay <= 0:
            raise ConfigError("need num_cycles >= 1 and decay > 0")

    @property
    def total_epochs(self) -> float:
        return self.cycle_epochs * self.num_cycles


PRETRAIN_SCHEDULE = ScheduleConfig(cycle_epochs=25, lr_max=1e-3, lr_min=1e-8, decay=0.8, num_cycles=2)
FINETUNE_SCHEDULE = ScheduleConfig(cycle_epochs=4, lr_max=1e-5, lr_min=1e-8, decay=1.0, num_cycles=1)


def sgdr_lr(epoch_fraction: float, cycle_index: int, cfg: ScheduleConfig) -> float:
    """Cosine-annealed rate within one cycle; the peak decays geometrically per restart."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ConfigError("epoch_fraction must lie in [0, 1]")
    peak = cfg.lr_max * cfg.decay ** cycle_index
    return cfg.lr_min + 0.5 * (peak - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch_fraction))


def lr_at_step(step: int, batches_per_epoch: int, cfg: ScheduleConfig) -> float:
    """Rate for global step ``step``; past the last cycle the rate stays at its final value."""
    epoch = step / batches_per_epoch
    cycle = int(epoch // cfg.cycle_epochs)
    if cycle >= cfg.num_cycles:
        return sgdr_lr(1.0, cfg.num_cycles - 1, cfg)
    frac = (epoch - cycle * cfg.cycle_epochs) / cfg.cycle_epochs
    return sgdr_lr(min(max(frac, 0.0), 1.0), cycle, cfg)
