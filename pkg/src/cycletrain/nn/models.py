from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .layers import (BatchNorm2d, Conv2d, Dense, Dropout, Flatten, GlobalAvgPool, Layer, ReLU,
                     ResidualBlock)
from .network import Network

HEAD_HIDDEN = 512
HEAD_DROPOUT = 0.25


def init_group(layers: list[Layer], seed: int, group_index: int, dtype=np.float32) -> None:
    # one stream per (seed, group, layer) so re-initializing a group never shifts another's weights
    for li, layer in enumerate(layers):
        layer.init_params(np.random.default_rng([seed, group_index, li]), dtype)


def make_head(in_features: int, num_classes: int, hidden: int = HEAD_HIDDEN,
              dropout: float = HEAD_DROPOUT) -> list[Layer]:
    return [
        GlobalAvgPool(),
        Flatten(),
        # no bias: batchnorm's shift makes it redundant whenever the unit is active
        Dense(in_features, hidden, bias=False),
        ReLU(),
        BatchNorm2d(hidden),
        Dropout(dropout),
        Dense(hidden, num_classes),
    ]


def build_classifier(channels: int, num_classes: int, seed: int, widths=(16, 32),
                     blocks_per_group: int = 1, hidden: int = HEAD_HIDDEN,
                     dropout: float = HEAD_DROPOUT) -> Network:
    """Small residual classifier: one body group per entry of ``widths``, then a head.

    Body group 0 is a 3x3 stem conv at full resolution; each later body group
    opens with a stride-2 3x3 conv that changes width. Every body group ends
    with ``blocks_per_group`` identity-skip residual blocks.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if channels <= 0 or not widths:
        raise ConfigError("need positive input channels and at least one body width")
    groups = []
    prev = channels
    for gi, w in enumerate(widths):
        stride = 1 if gi == 0 else 2
        group: list[Layer] = [Conv2d(prev, w, 3, stride, 1), BatchNorm2d(w), ReLU()]
        group += [ResidualBlock(w) for _ in range(blocks_per_group)]
        groups.append(group)
        prev = w
    groups.append(make_head(prev, num_classes, hidden, dropout))
    for gi, group in enumerate(groups):
        init_group(group, seed, gi)
    meta = {"arch": "mini-resnet", "in_channels": channels, "num_classes": num_classes,
            "widths": list(widths), "blocks_per_group": blocks_per_group,
            "hidden": hidden, "dropout": dropout}
    return Network(groups, seed=seed, meta=meta)


def body_out_features(net: Network) -> int:
    """Channel count entering the head (last conv/residual width in the body)."""
    for layer in reversed([layer for group in net.groups[:-1] for layer in group]):
        for attr in ("out_channels", "channels", "num_channels", "out_features"):
            if hasattr(layer, attr):
                return getattr(layer, attr)
    raise ConfigError("could not infer body output width")
