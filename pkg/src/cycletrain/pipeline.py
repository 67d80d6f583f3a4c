"""Transfer-learning stage driver.

A plan is a list of stages. Each stage fixes the image size, batch size,
learning-rate spec and whether the body is frozen, and gets its own
one-cycle schedule and fresh AdamW moments. The network carries over from
stage to stage.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import AugmentConfig, DatasetManifest, iter_batches
from .errors import ConfigError, DataError
from .metrics import evaluate
from .nn.loss import softmax_cross_entropy
from .nn.models import body_out_features, init_group, make_head
from .nn.network import Network
from .optim import AdamWConfig, AdamWState, adamw_step, build_groups, lr_spec_bounds
from .schedule import OneCycleConfig, lr_at, momentum_at

log = logging.getLogger(__name__)

PLAN_KEYS = {"epochs", "image_size", "batch_size", "lr", "frozen"}


@dataclass(frozen=True)
class StagePlan:
    epochs: int
    image_size: int
    batch_size: int
    lr: float | tuple[float, float]
    frozen: bool

    def __post_init__(self):
        for name in ("epochs", "image_size", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.frozen, bool):
            raise ConfigError(f"frozen must be a boolean, got {self.frozen!r}")
        lr = self.lr
        if isinstance(lr, (list, tuple)):
            if len(lr) != 2:
                raise ConfigError(f"lr pair must have two entries, got {lr!r}")
            lr = (float(lr[0]), float(lr[1]))
        elif isinstance(lr, bool) or not isinstance(lr, (int, float)):
            raise ConfigError(f"lr must be a number or a (low, high) pair, got {lr!r}")
        else:
            lr = float(lr)
        lr_spec_bounds(lr)
        object.__setattr__(self, "lr", lr)

    @property
    def eta_max(self) -> float:
        return lr_spec_bounds(self.lr)[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = list(self.lr) if isinstance(self.lr, tuple) else self.lr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        if not isinstance(d, dict):
            raise ConfigError(f"stage must be a JSON object, got {type(d).__name__}")
        keys = set(d)
        if keys != PLAN_KEYS:
            missing, unknown = PLAN_KEYS - keys, keys - PLAN_KEYS
            raise ConfigError(f"stage keys wrong: missing {sorted(missing)}, unknown {sorted(unknown)}")
        return cls(**d)


def parse_plan(doc) -> list[StagePlan]:
    if not isinstance(doc, list) or not doc:
        raise ConfigError("plan must be a non-empty JSON array of stages")
    return [StagePlan.from_dict(d) for d in doc]


def load_plan(path_or_name) -> list[StagePlan]:
    """Load a plan file, or a shipped plan by name (``table2``, ``default``)."""
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text()
    else:
        name = p.name if p.suffix == ".json" else f"{p.name}.json"
        try:
            text = resources.files("cycletrain.plans").joinpath(name).read_text()
        except FileNotFoundError:
            raise ConfigError(f"no plan file or shipped plan named {path_or_name!r}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan is not valid JSON: {exc}") from None
    return parse_plan(doc)


def plan_to_json(stages: list[StagePlan]) -> str:
    return json.dumps([s.to_dict() for s in stages], indent=2) + "\n"


# -- network surgery -------------------------------------------------------------

def replace_head(net: Network, num_classes: int, seed: int) -> Network:
    """Copy of ``net`` whose last group is a freshly initialized head for ``num_classes``."""
    if net.num_groups < 2:
        raise ConfigError("network needs at least one body group before the head")
    out = net.copy()
    width = body_out_features(out)
    hidden = out.meta.get("hidden", 512)
    dropout = out.meta.get("dropout", 0.25)
    head = make_head(width, num_classes, hidden, dropout)
    init_group(head, seed, out.num_groups - 1, out.dtype)
    out.groups[-1] = head
    out.meta["num_classes"] = num_classes
    return out


def set_frozen(net: Network, frozen: bool) -> None:
    """Freeze (or unfreeze) every body group; the head always stays trainable."""
    for g in range(net.num_groups - 1):
        net.set_group_trainable(g, not frozen)
    net.set_group_trainable(net.num_groups - 1, True)


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleDefaults:
    """Per-stage schedule settings; ``policy`` is ``"one-cycle"`` or ``"constant"``.

    The constant policy is the control baseline: the stage's upper rate and
    ``mom_max`` at every iteration.
    """

    warmup_frac: float = 0.30
    div: float = 25.0
    mom_max: float = 0.90
    mom_min: float = 0.85
    policy: str = "one-cycle"

    def __post_init__(self):
        if self.policy not in ("one-cycle", "constant"):
            raise ConfigError(f"unknown schedule policy {self.policy!r}")

    def one_cycle(self, eta_max: float, total_iters: int) -> OneCycleConfig:
        return OneCycleConfig(eta_max, total_iters, eta_max / self.div, self.warmup_frac,
                              self.mom_max, self.mom_min)


@dataclass(frozen=True)
class IterRecord:
    iter: int
    train_loss: float
    lr: float
    momentum: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainRecord:
    stage: StagePlan
    iterations: list[IterRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def lr_trace(self) -> np.ndarray:
        return np.array([r.lr for r in self.iterations])


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def run_stage(net: Network, data: DatasetManifest, stage: StagePlan,
              adamw: AdamWConfig = AdamWConfig(), sched: ScheduleDefaults = ScheduleDefaults(),
              seed: int = 0, stage_index: int = 0, augment_cfg: AugmentConfig | None = None,
              eval_batch_size: int = 256, state: AdamWState | None = None) -> TrainRecord:
    """Train ``net`` in place for one stage and return its loss/LR record."""
    train_idx = data.train_idx
    if train_idx.size == 0:
        raise DataError("empty training split")
    spe = steps_per_epoch(train_idx.size, stage.batch_size)
    total = stage.epochs * spe
    onecycle = sched.one_cycle(stage.eta_max, total) if sched.policy == "one-cycle" else None
    set_frozen(net, stage.frozen)
    frozen_flags = [not net.group_trainable(g) for g in range(net.num_groups)]
    groups = build_groups(net.num_groups, stage.lr, frozen_flags)
    state = state if state is not None else AdamWState()
    record = TrainRecord(stage)
    it = 0
    for epoch in range(stage.epochs):
        net.train()
        losses = []
        batches = iter_batches(data, train_idx, stage.batch_size, stage.image_size,
                               shuffle_key=(seed, stage_index, epoch), augment_cfg=augment_cfg)
        for x, y in batches:
            if onecycle is not None:
                lr, mom = lr_at(onecycle, it), momentum_at(onecycle, it)
            else:
                lr, mom = stage.eta_max, sched.mom_max
            loss, grad = softmax_cross_entropy(net.forward(x), y)
            net.backward(grad)
            adamw_step(net, state, adamw, lr, mom, groups)
            record.iterations.append(IterRecord(it, loss, lr, mom))
            losses.append(loss)
            it += 1
        if data.val_idx.size:
            rep = evaluate(net, iter_batches(data, data.val_idx, eval_batch_size, stage.image_size),
                           data.num_classes)
            val_loss, val_acc = rep.mean_loss, rep.accuracy
        else:
            val_loss = val_acc = math.nan
        record.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_acc))
        log.info("stage %d epoch %d: train %.4f val %.4f acc %.4f", stage_index + 1, epoch + 1,
                 record.epochs[-1].train_loss, val_loss, val_acc)
    net.train()
    return record


def run_plan(net: Network, data: DatasetManifest, stages: list[StagePlan],
             adamw: AdamWConfig = AdamWConfig(), sched: ScheduleDefaults = ScheduleDefaults(),
             seed: int = 0, out_dir=None, start_stage: int = 0,
             augment_cfg: AugmentConfig | None = None, extra: dict | None = None,
             checkpoint_prefix: str = "stage") -> list[TrainRecord]:
    """Run ``stages[start_stage:]`` in order on ``net`` (in place).

    With ``out_dir`` set, ``<prefix><k>.ckpt`` is written after stage ``k``
    (1-based) with enough metadata to resume from the next stage.
    """
    if not stages:
        raise ConfigError("plan has no stages")
    if not 0 <= start_stage <= len(stages):
        raise ConfigError(f"start_stage {start_stage} outside [0, {len(stages)}]")
    records = []
    for k in range(start_stage, len(stages)):
        state = AdamWState()
        rec = run_stage(net, data, stages[k], adamw, sched, seed, k, augment_cfg, state=state)
        records.append(rec)
        if out_dir is not None:
            meta = {"stage": k, "seed": seed, "plan": [s.to_dict() for s in stages],
                    "data": data.origin, "policy": sched.policy, **(extra or {})}
            save_checkpoint(Path(out_dir) / f"{checkpoint_prefix}{k + 1}.ckpt", net, state, meta)
    return records


# -- exports ----------------------------------------------------------------------

LOSS_CURVE_HEADER = ["run", "stage", "kind", "step", "iter", "epoch", "train_loss", "lr",
                     "momentum", "val_loss", "val_accuracy"]


def _fmt(x) -> str:
    return f"{x:.10g}"


def loss_curve_rows(records: list[TrainRecord], run: str = "one-cycle", first_stage: int = 1):
    step = 0
    for s, rec in enumerate(records, start=first_stage):
        for r in rec.iterations:
            yield [run, s, "iter", step, r.iter, "", _fmt(r.train_loss), _fmt(r.lr), _fmt(r.momentum), "", ""]
            step += 1
        for e in rec.epochs:
            yield [run, s, "epoch", "", "", e.epoch, _fmt(e.train_loss), "", "",
                   _fmt(e.val_loss), _fmt(e.val_accuracy)]


def loss_curve_csv(runs: dict[str, list[TrainRecord]], first_stage: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_CURVE_HEADER)
    for name, records in runs.items():
        w.writerows(loss_curve_rows(records, name, first_stage))
    return buf.getvalue()


def stage_schedule_csv(records: list[TrainRecord], first_stage: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "iter", "lr", "momentum"])
    for s, rec in enumerate(records, start=first_stage):
        for r in rec.iterations:
            w.writerow([s, r.iter, _fmt(r.lr), _fmt(r.momentum)])
    return buf.getvalue()
