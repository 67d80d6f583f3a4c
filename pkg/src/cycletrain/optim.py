"""AdamW with decoupled weight decay and per-group learning-rate scales."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .nn.network import Network


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if not self.eps > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.eps}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class ParamGroup:
    group_index: int
    lr_scale: float
    frozen: bool = False

    def __post_init__(self):
        if not self.lr_scale > 0:
            raise ConfigError(f"lr_scale must be > 0, got {self.lr_scale}")


@dataclass
class AdamWState:
    """First/second moments keyed by qualified parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def lr_spec_bounds(lr_spec) -> tuple[float, float]:
    """``(low, high)`` for a single rate or a ``(low, high)`` pair."""
    if isinstance(lr_spec, (int, float)):
        lo = hi = float(lr_spec)
    else:
        try:
            lo, hi = (float(r) for r in lr_spec)
        except (TypeError, ValueError):
            raise ConfigError(f"lr spec must be a number or a (low, high) pair, got {lr_spec!r}") from None
    if not (lo > 0 and hi > 0 and math.isfinite(lo) and math.isfinite(hi)):
        raise ConfigError(f"learning rates must be positive and finite, got {lr_spec!r}")
    if lo > hi:
        raise ConfigError(f"lr pair must be ordered low <= high, got ({lo}, {hi})")
    return lo, hi


def group_rates(n_groups: int, lr_spec) -> list[float]:
    """Effective peak rate per group, geometrically spaced from low (group 0) to high (head)."""
    if n_groups < 1:
        raise ConfigError("need at least one group")
    lo, hi = lr_spec_bounds(lr_spec)
    if n_groups == 1 or lo == hi:
        return [hi] * n_groups
    return [float(lo * (hi / lo) ** (i / (n_groups - 1))) for i in range(n_groups)]


def build_groups(n_groups: int, lr_spec, frozen=None) -> list[ParamGroup]:
    """Param groups whose ``lr_scale`` times the upper rate gives each group's rate.

    ``frozen`` is an optional per-group sequence of booleans.
    """
    _, hi = lr_spec_bounds(lr_spec)
    rates = group_rates(n_groups, lr_spec)
    frozen = list(frozen) if frozen is not None else [False] * n_groups
    if len(frozen) != n_groups:
        raise ConfigError(f"frozen flags ({len(frozen)}) do not match group count ({n_groups})")
    return [ParamGroup(i, r / hi, bool(f)) for i, (r, f) in enumerate(zip(rates, frozen))]


def adamw_step(net: Network, state: AdamWState, cfg: AdamWConfig, base_lr: float,
               base_momentum: float | None, groups: list[ParamGroup]) -> None:
    """One AdamW update of every unfrozen, trainable parameter that has a gradient.

    ``base_momentum`` (the scheduled momentum) replaces ``cfg.beta1`` for this
    step; pass None to use ``cfg.beta1``. Decay is applied to the pre-step
    weights, separately from the gradient:
    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    All gradients are cleared afterwards.
    """
    if not base_lr > 0:
        raise ConfigError(f"base_lr must be > 0, got {base_lr}")
    beta1 = cfg.beta1 if base_momentum is None else float(base_momentum)
    if not 0 < beta1 < 1:
        raise ConfigError(f"momentum must lie in (0, 1), got {beta1}")
    if len(groups) != net.num_groups:
        raise ConfigError(f"got {len(groups)} param groups for a {net.num_groups}-group network")
    beta2 = cfg.beta2
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    updates = []
    for grp in groups:
        if grp.frozen:
            continue
        lr = base_lr * grp.lr_scale
        for name, p in net.named_parameters(grp.group_index):
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            dt = p.data.dtype
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
            v = state.v[name]
            m *= dt.type(beta1)
            m += dt.type(1 - beta1) * g
            v *= dt.type(beta2)
            v += dt.type(1 - beta2) * (g * g)
            m_hat = m / dt.type(bc1)
            v_hat = v / dt.type(bc2)
            with np.errstate(invalid="ignore", over="ignore"):
                step = m_hat / (np.sqrt(v_hat) + dt.type(cfg.eps))
                new = p.data * dt.type(1.0 - lr * cfg.weight_decay) - dt.type(lr) * step
            if not np.isfinite(new).all():
                raise NonFiniteError(f"non-finite AdamW update for {name}", name=name)
            updates.append((p, new))
    for p, new in updates:
        p.data[...] = new
    net.zero_grad()
