"""From-scratch numpy training engine for staged transfer learning.

One-cycle scheduling, LR range finding, AdamW with discriminative group
rates, freeze/unfreeze stages and progressive resizing on a small residual
network.
"""

__version__ = "0.1.0"

from .nn import Network, Tensor, build_classifier, grad_check, softmax_cross_entropy
from .optim import AdamWConfig, AdamWState, ParamGroup, adamw_step, build_groups
from .schedule import OneCycleConfig, SchedulePoint, export_schedule, lr_at, momentum_at

__all__ = [
    "AdamWConfig", "AdamWState", "Network", "OneCycleConfig", "ParamGroup", "SchedulePoint",
    "Tensor", "adamw_step", "build_classifier", "build_groups", "export_schedule", "grad_check",
    "lr_at", "momentum_at", "softmax_cross_entropy",
]
