"""AdamW with decoupled weight decay and the three learning-rate schedules.

Schedules are pure functions of the step index. Warmup is linear from zero;
``lr(warmup_steps) == peak_lr`` exactly for every schedule kind. The linear
decay reaches exactly zero at ``total_steps``, as does the cosine tail. The
cyclic schedule splits the run into equal segments, each ramping to the peak
over the first 10% of the segment and cosine-annealing to zero at its end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "AdamWHyper", "AdamWState", "ScheduleConfig", "TrainConfig",
    "adamw_step", "lr_warmup_linear", "lr_warmup_cosine", "lr_cyclic", "schedule_lr",
]


@dataclass
class AdamWHyper:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class AdamWState:
    """First/second moment accumulators shaped like the parameters."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    hyper: AdamWHyper,
    lr: float,
) -> tuple[Mapping[str, np.ndarray], AdamWState]:
    """One AdamW update, in place, over a flat name -> tensor mapping.

    Weight decay is decoupled: it scales the parameters directly and never
    enters the moment accumulators. Moments are bias-corrected.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if set(params.keys()) != set(grads.keys()):
        raise ValueError("params and grads hold different tensor names")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if hyper.weight_decay:
            p *= 1.0 - lr * hyper.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
    return params, state


@dataclass
class ScheduleConfig:
    kind: str                 # "warmup-linear" | "warmup-cosine" | "cyclic"
    warmup_steps: int
    peak_lr: float
    total_steps: int
    cycles: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("warmup-linear", "warmup-cosine", "cyclic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")


def _check_step(step: int, cfg: ScheduleConfig) -> None:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")


def lr_warmup_linear(step: int, cfg: ScheduleConfig) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps."""
    _check_step(step, cfg)
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak_lr
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def lr_warmup_cosine(step: int, cfg: ScheduleConfig) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> 0 at total_steps."""
    _check_step(step, cfg)
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_cyclic(step: int, cfg: ScheduleConfig) -> float:
    """Repeated warmup-cosine segments; one per cycle, all identical.

    Within each segment the rate ramps linearly to the peak over the first
    10% of the segment and cosine-anneals to zero at the segment end, so
    ``lr(s) == lr(s + segment)`` and every cycle boundary sits at zero.
    """
    _check_step(step, cfg)
    if cfg.total_steps % cfg.cycles != 0:
        raise ValueError(
            f"total_steps={cfg.total_steps} not divisible by cycles={cfg.cycles}"
        )
    if step == cfg.total_steps:
        return 0.0
    seg = cfg.total_steps // cfg.cycles
    s = step % seg
    ramp = 0.1 * seg
    if s <= ramp:
        return cfg.peak_lr * s / ramp
    progress = (s - ramp) / (seg - ramp)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


_SCHEDULES = {
    "warmup-linear": lr_warmup_linear,
    "warmup-cosine": lr_warmup_cosine,
    "cyclic": lr_cyclic,
}


def schedule_lr(step: int, cfg: ScheduleConfig) -> float:
    return _SCHEDULES[cfg.kind](step, cfg)


@dataclass
class TrainConfig:
    """Loop-level knobs shared by the pretraining, finetuning, filter, and
    snapshot trainers. The defaults are the finetuning recipe; callers
    override per stage."""

    total_steps: int = 2000
    batch_size: int = 32
    warmup_steps: int = 100
    peak_lr: float = 5e-6
    weight_decay: float = 0.01
    seed: int = 0
