"""AdamW with global-norm clipping, and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, step: int | None = None):
        self.name = name
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite gradient in parameter '{name}'{where}")


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 3e-3
    total_steps: int = 2000
    warmup_steps: int | None = None
    final_fraction: float = 0.1

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps must be in [0, total_steps={self.total_steps}), got {self.warmup_steps}"
            )
        if not 0 <= self.final_fraction <= 1:
            raise ValueError(f"final_fraction must be in [0, 1], got {self.final_fraction}")

    @property
    def warmup(self) -> int:
        """Explicit warmup, else 1% of total steps."""
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(self.total_steps // 100, self.total_steps - 1)


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Learning rate for update number `step`, counted from 1 by the trainer."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warmup, total, peak = schedule.warmup, schedule.total_steps, schedule.peak_lr
    if step < warmup:
        return peak * step / warmup
    progress = min((step - warmup) / (total - warmup), 1.0)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return peak * (schedule.final_fraction + (1.0 - schedule.final_fraction) * cosine)


# =============================================================================
# AdamW
# =============================================================================

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by min(1, max_norm / norm); returns (clipped, pre-clip norm)."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def check_finite(grads: dict[str, np.ndarray], step: int | None = None) -> None:
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name, step)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: OptimizerConfig,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One update: clip, bias-corrected moments, decoupled decay. Inputs are not mutated."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"params and grads disagree on names: {missing}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {grads[name].shape}, parameter has {p.shape}")
    check_finite(grads, state.step + 1)
    clipped, _ = clip_by_global_norm(grads, cfg.grad_clip)

    t = state.step + 1
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = clipped[name]
        m = cfg.beta1 * state.m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        new_params[name] = p - lr * cfg.weight_decay * p - lr * update
        new_m[name] = np.asarray(m, dtype=np.float64)
        new_v[name] = np.asarray(v, dtype=np.float64)
    return new_params, AdamWState(step=t, m=new_m, v=new_v)
