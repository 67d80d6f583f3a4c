"""Modified one-cycle policy: linear LR warmup, cosine annealing, mirrored momentum.

With ``B = round(warmup_frac * total_iters)``:

* iterations ``0..B`` warm up linearly, ``lr = lo + (hi - lo) * i / B``;
* iterations ``B..total`` anneal along half a cosine,
  ``lr = lo + (hi - lo) * (1 + cos(pi * j / T)) / 2`` with ``j = i - B``,
  ``T = total - B``.

Momentum runs the other way: linearly down from ``mom_max`` to ``mom_min``
during warmup, then back up along the cosine.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .errors import ConfigError

DEFAULT_DIV = 25.0


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class OneCycleConfig:
    eta_max: float
    total_iters: int
    eta_min: float | None = None
    warmup_frac: float = 0.30
    mom_max: float = 0.90
    mom_min: float = 0.85

    def __post_init__(self):
        if self.eta_min is None:
            object.__setattr__(self, "eta_min", self.eta_max / DEFAULT_DIV)
        if not (self.eta_max > 0 and self.eta_min > 0):
            raise ConfigError("eta_max and eta_min must be positive")
        if not self.eta_min < self.eta_max:
            raise ConfigError(f"eta_min ({self.eta_min}) must be below eta_max ({self.eta_max})")
        if not self.mom_min < self.mom_max:
            raise ConfigError(f"mom_min ({self.mom_min}) must be below mom_max ({self.mom_max})")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        if int(self.total_iters) != self.total_iters or self.total_iters < 2:
            raise ConfigError(f"total_iters must be an integer >= 2, got {self.total_iters}")
        b = round_half_up(self.warmup_frac * self.total_iters)
        if not 1 <= b <= self.total_iters - 1:
            raise ConfigError(f"warmup boundary {b} outside [1, {self.total_iters - 1}]")

    @property
    def boundary(self) -> int:
        """Iteration at which warmup ends and annealing starts (the LR peak)."""
        return round_half_up(self.warmup_frac * self.total_iters)


@dataclass(frozen=True)
class SchedulePoint:
    iter: int
    lr: float
    momentum: float


def _check_iter(cfg: OneCycleConfig, it: int) -> None:
    if not 0 <= it <= cfg.total_iters:
        raise ConfigError(f"iteration {it} outside [0, {cfg.total_iters}]")


def _clamp(x: float, lo: float, hi: float) -> float:
    # lo + (hi - lo) * 1 can land one ulp outside [lo, hi]; the endpoints must be exact
    return min(max(x, lo), hi)


def _anneal(lo: float, hi: float, t_i: int, t: int) -> float:
    return _clamp(lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t_i / t)), lo, hi)


def lr_at(cfg: OneCycleConfig, it: int) -> float:
    _check_iter(cfg, it)
    b = cfg.boundary
    lo, hi = cfg.eta_min, cfg.eta_max
    if it == b:
        return hi
    if it < b:
        return _clamp(lo + (hi - lo) * it / b, lo, hi)
    return _anneal(lo, hi, it - b, cfg.total_iters - b)


def momentum_at(cfg: OneCycleConfig, it: int) -> float:
    _check_iter(cfg, it)
    b = cfg.boundary
    lo, hi = cfg.mom_min, cfg.mom_max
    if it == b:
        return lo
    if it < b:
        return _clamp(hi - (hi - lo) * it / b, lo, hi)
    # mirror image of the LR anneal: rises from mom_min back to mom_max
    t = cfg.total_iters - b
    return _clamp(lo + 0.5 * (hi - lo) * (1.0 - math.cos(math.pi * (it - b) / t)), lo, hi)


def export_schedule(cfg: OneCycleConfig) -> list[SchedulePoint]:
    return [SchedulePoint(i, lr_at(cfg, i), momentum_at(cfg, i)) for i in range(cfg.total_iters + 1)]


def schedule_csv(points: list[SchedulePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "lr", "momentum"])
    for p in points:
        w.writerow([p.iter, f"{p.lr:.12g}", f"{p.momentum:.12g}"])
    return buf.getvalue()
