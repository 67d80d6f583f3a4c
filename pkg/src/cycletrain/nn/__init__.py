from .gradcheck import grad_check, relative_error
from .layers import (LAYER_KINDS, BatchNorm2d, Conv2d, Dense, Dropout, Flatten, GlobalAvgPool,
                     Layer, ReLU, ResidualBlock, layer_from_spec)
from .loss import softmax, softmax_cross_entropy
from .models import body_out_features, build_classifier, init_group, make_head
from .network import Network
from .tensor import Tensor

__all__ = [
    "LAYER_KINDS", "BatchNorm2d", "Conv2d", "Dense", "Dropout", "Flatten", "GlobalAvgPool",
    "Layer", "Network", "ReLU", "ResidualBlock", "Tensor", "body_out_features",
    "build_classifier", "grad_check", "init_group", "layer_from_spec", "make_head",
    "relative_error", "softmax", "softmax_cross_entropy",
]
