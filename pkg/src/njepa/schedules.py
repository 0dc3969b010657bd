"""Hyper-parameter schedules whose period is stretched by ``ipe_scale``.

A schedule is defined over ``ipe_scale * total_steps`` steps but only ever
evaluated up to ``total_steps``, so with ipe_scale > 1 the tail of each
trajectory is cut off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

KINDS = ("lr", "weight_decay", "ema_momentum")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    start: float
    peak: float
    final: float
    total_steps: int
    warmup_steps: int = 0
    ipe_scale: float = 1.25
    shape: str = "cosine"  # lr only: "cosine" or "constant" after warmup

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.ipe_scale < 1:
            raise ValueError("ipe_scale must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    @property
    def period(self) -> float:
        return self.ipe_scale * self.total_steps

    def __call__(self, step: int) -> float:
        return value_at(self, step)


def _check_step(spec: ScheduleSpec, step: int) -> None:
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")


def _cosine(a: float, b: float, frac: float) -> float:
    """Half-cosine from a (frac=0) to b (frac=1)."""
    return b + (a - b) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(spec: ScheduleSpec, step: int) -> float:
    _check_step(spec, step)
    w = spec.warmup_steps
    if step < w:
        t = step / w
        return (1.0 - t) * spec.start + t * spec.peak
    if spec.shape == "constant":
        return spec.peak
    frac = (step - w) / (spec.period - w)
    return _cosine(spec.peak, spec.final, frac)


def wd_at(spec: ScheduleSpec, step: int) -> float:
    _check_step(spec, step)
    return _cosine(spec.start, spec.final, step / spec.period)


def ema_momentum_at(spec: ScheduleSpec, step: int) -> float:
    _check_step(spec, step)
    t = step / spec.period
    return (1.0 - t) * spec.start + t * spec.final


def value_at(spec: ScheduleSpec, step: int) -> float:
    if spec.kind == "lr":
        return lr_at(spec, step)
    if spec.kind == "weight_decay":
        return wd_at(spec, step)
    return ema_momentum_at(spec, step)
