"""LR range test: exponentially growing rate until the loss blows up."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .nn.loss import softmax_cross_entropy
from .nn.network import Network
from .optim import AdamWConfig, AdamWState, adamw_step, build_groups


@dataclass(frozen=True)
class LrSweepConfig:
    start_lr: float = 1e-7
    end_lr: float = 10.0
    num_steps: int = 100
    beta: float = 0.98
    divergence_factor: float = 4.0

    def __post_init__(self):
        if not 0 < self.start_lr < self.end_lr:
            raise ConfigError(f"need 0 < start_lr < end_lr, got {self.start_lr}, {self.end_lr}")
        if self.num_steps < 10:
            raise ConfigError(f"num_steps must be >= 10, got {self.num_steps}")
        if not 0 <= self.beta < 1:
            raise ConfigError(f"smoothing beta must lie in [0, 1), got {self.beta}")
        if not self.divergence_factor > 1:
            raise ConfigError(f"divergence_factor must be > 1, got {self.divergence_factor}")

    def lr(self, i: int) -> float:
        return self.start_lr * (self.end_lr / self.start_lr) ** (i / (self.num_steps - 1))

    def grid(self) -> np.ndarray:
        return np.array([self.lr(i) for i in range(self.num_steps)])


@dataclass(frozen=True)
class SweepRow:
    lr: float
    raw_loss: float
    smoothed_loss: float


@dataclass
class LrSweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    stopped_early: bool = False
    selected_eta_max: float = float("nan")

    @property
    def best_lr(self) -> float:
        """Rate at the smoothed-loss minimum (selection is one tenth of it)."""
        return self.selected_eta_max * 10

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lr", "raw_loss", "smoothed_loss"])
        for r in self.rows:
            w.writerow([f"{r.lr:.12g}", f"{r.raw_loss:.12g}", f"{r.smoothed_loss:.12g}"])
        return buf.getvalue()


class SmoothedLoss:
    """Bias-corrected EMA of a loss stream with the divergence stopping rule."""

    def __init__(self, beta: float = 0.98, divergence_factor: float = 4.0):
        self.beta = beta
        self.factor = divergence_factor
        self.avg = 0.0
        self.n = 0
        self.best = math.inf

    def update(self, loss: float) -> tuple[float, bool]:
        """Feed one raw loss; return ``(smoothed, diverged)``."""
        if not math.isfinite(loss):
            return math.nan, True
        self.n += 1
        self.avg = self.beta * self.avg + (1 - self.beta) * loss
        smoothed = self.avg / (1 - self.beta ** self.n)
        self.best = min(self.best, smoothed)
        return smoothed, smoothed > self.factor * self.best


def select_eta_max(rows: list[SweepRow]) -> float:
    """One tenth of the rate with the lowest smoothed loss (earliest row wins ties)."""
    finite = [r for r in rows if math.isfinite(r.smoothed_loss)]
    if not finite:
        raise ConfigError("no finite losses recorded")
    best = min(finite, key=lambda r: r.smoothed_loss)  # min() keeps the first of equal keys
    return best.lr / 10


def run_lr_sweep(net: Network, batches, cfg: LrSweepConfig = LrSweepConfig(),
                 adamw: AdamWConfig = AdamWConfig(), objective=softmax_cross_entropy) -> LrSweepResult:
    """Train a copy of ``net`` for up to ``cfg.num_steps`` minibatches at growing rates.

    ``batches`` is an iterable of ``(inputs, targets)``; it is cycled if it runs
    out. Every group gets the same rate. The caller's network is not touched.
    """
    work = net.copy().train()
    state = AdamWState()
    frozen = [not work.group_trainable(g) for g in range(work.num_groups)]
    tracker = SmoothedLoss(cfg.beta, cfg.divergence_factor)
    result = LrSweepResult()
    stream = itertools.cycle(batches)
    for i in range(cfg.num_steps):
        lr = cfg.lr(i)
        x, y = next(stream)
        try:
            loss, grad = objective(work.forward(x), y)
        except NonFiniteError:
            loss = math.nan
        smoothed, diverged = tracker.update(loss)
        if i == 0 and not math.isfinite(loss):
            raise NonFiniteError(f"start_lr already divergent: non-finite loss at lr={lr:g}")
        result.rows.append(SweepRow(lr, loss, smoothed))
        if diverged:
            result.stopped_early = i < cfg.num_steps - 1
            break
        work.backward(grad)
        try:
            adamw_step(work, state, adamw, lr, None, build_groups(work.num_groups, lr, frozen))
        except NonFiniteError:
            result.stopped_early = i < cfg.num_steps - 1
            break
    result.selected_eta_max = select_eta_max(result.rows)
    return result
