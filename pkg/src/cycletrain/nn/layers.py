"""Fixed layer vocabulary with hand-written backward passes.

Activations are NCHW ndarrays (or N x F after flatten). Each layer caches
what its backward needs during ``forward`` and drops it in ``backward``.
Parameter gradients are only written for tensors with ``trainable=True``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BackwardError, ConfigError, ShapeError
from .tensor import Tensor

LAYER_KINDS = {}


def register(cls):
    LAYER_KINDS[cls.kind] = cls
    return cls


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # gain sqrt(2) for ReLU: bound = sqrt(6 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        pass

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: np.ndarray, train: bool, key=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for _, p in self.params():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        for name, b in self.buffers():
            self.set_buffer(name, b.astype(dtype))

    def _pop_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def clear_cache(self) -> None:
        self._cache = None

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


@register
class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ConfigError(f"dense fan-in/out must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features), np.float32), "weight")
        self.bias = Tensor(np.zeros(out_features, np.float32), "bias") if bias else None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def init_params(self, rng, dtype):
        self.weight.data = kaiming_uniform(rng, self.weight.shape, self.in_features, dtype)
        if self.bias is not None:
            self.bias.data = np.zeros(self.out_features, dtype)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias is not None}

    def forward(self, x, train, key=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected input (B, {self.in_features}), got {x.shape}", repr(self))
        out = x @ self.weight.data.T
        if self.bias is not None:
            out += self.bias.data
        self._cache = x
        return out

    def backward(self, dout, need_input_grad=True):
        x = self._pop_cache()
        if self.weight.trainable:
            self.weight.accumulate(dout.T @ x)
            if self.bias is not None:
                self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.data if need_input_grad else None


@register
class Conv2d(Layer):
    """2-D convolution (cross-correlation) over NCHW input with zero padding.

    ``padding`` is an int or ``"same"``; "same" requires an odd kernel and
    preserves spatial size at stride 1.
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding=0, bias: bool = False):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ConfigError(f"conv2d channels must be positive, got {in_channels}->{out_channels}")
        if kernel_size <= 0 or stride <= 0:
            raise ConfigError("conv2d kernel_size and stride must be positive")
        if padding == "same":
            if kernel_size % 2 == 0:
                raise ConfigError(f"'same' padding needs an odd kernel, got {kernel_size}")
        elif not (isinstance(padding, int) and padding >= 0):
            raise ConfigError(f"padding must be a non-negative int or 'same', got {padding!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.weight = Tensor(np.zeros((out_channels, in_channels, k, k), np.float32), "weight")
        self.bias = Tensor(np.zeros(out_channels, np.float32), "bias") if bias else None

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding == "same" else self.padding

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def init_params(self, rng, dtype):
        fan_in = self.in_channels * self.kernel_size ** 2
        self.weight.data = kaiming_uniform(rng, self.weight.shape, fan_in, dtype)
        if self.bias is not None:
            self.bias.data = np.zeros(self.out_channels, dtype)

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding, "bias": self.bias is not None}

    def forward(self, x, train, key=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected input (B, {self.in_channels}, H, W), got {x.shape}", repr(self))
        B, C, H, W = x.shape
        k, s, p = self.kernel_size, self.stride, self.pad
        if H + 2 * p < k or W + 2 * p < k:
            raise ShapeError(f"input {H}x{W} smaller than kernel {k} after padding", repr(self))
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ wmat.T
        if self.bias is not None:
            out += self.bias.data
        out = np.ascontiguousarray(out.reshape(B, Ho, Wo, self.out_channels).transpose(0, 3, 1, 2))
        self._cache = (cols, x.shape, Ho, Wo)
        return out

    def backward(self, dout, need_input_grad=True):
        cols, (B, C, H, W), Ho, Wo = self._pop_cache()
        k, s, p = self.kernel_size, self.stride, self.pad
        O = self.out_channels
        dmat = dout.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if self.weight.trainable:
            self.weight.accumulate((dmat.T @ cols).reshape(self.weight.shape))
            if self.bias is not None:
                self.bias.accumulate(dmat.sum(axis=0))
        if not need_input_grad:
            return None
        wmat = self.weight.data.reshape(O, -1)
        dcols = (dmat @ wmat).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, :, i, j]
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


@register
class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Accepts NCHW input, or N x C after flatten (normalizing over the batch
    only). Train mode normalizes with batch statistics and updates the running
    estimates; eval mode uses the running estimates.
    """

    kind = "batchnorm2d"

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if num_channels <= 0:
            raise ConfigError("batchnorm channel count must be positive")
        if not eps > 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {eps}")
        if not 0 <= momentum <= 1:
            raise ConfigError(f"batchnorm momentum must be in [0, 1], got {momentum}")
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_channels, np.float32), "gamma")
        self.beta = Tensor(np.zeros(num_channels, np.float32), "beta")
        self.running_mean = np.zeros(num_channels, np.float32)
        self.running_var = np.ones(num_channels, np.float32)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        if value.shape != (self.num_channels,):
            raise ShapeError(f"buffer {name} expects shape ({self.num_channels},), got {value.shape}", repr(self))
        setattr(self, name, value)

    def init_params(self, rng, dtype):
        self.gamma.data = np.ones(self.num_channels, dtype)
        self.beta.data = np.zeros(self.num_channels, dtype)
        self.running_mean = np.zeros(self.num_channels, dtype)
        self.running_var = np.ones(self.num_channels, dtype)

    def spec(self):
        return {"kind": self.kind, "num_channels": self.num_channels,
                "momentum": self.momentum, "eps": self.eps}

    def _shape(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise ShapeError(f"expected 2-D or 4-D input, got {x.shape}", repr(self))

    def forward(self, x, train, key=None):
        axes, bshape = self._shape(x)
        if x.shape[1] != self.num_channels:
            raise ShapeError(f"expected {self.num_channels} channels, got {x.shape[1]}", repr(self))
        if train:
            n = x.size // self.num_channels
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = xhat * self.gamma.data.reshape(bshape) + self.beta.data.reshape(bshape)
        self._cache = (xhat, inv_std, train, axes, bshape)
        return out

    def backward(self, dout, need_input_grad=True):
        xhat, inv_std, train, axes, bshape = self._pop_cache()
        if self.gamma.trainable:
            self.gamma.accumulate((dout * xhat).sum(axis=axes))
            self.beta.accumulate(dout.sum(axis=axes))
        if not need_input_grad:
            return None
        dxhat = dout * self.gamma.data.reshape(bshape)
        if not train:
            return dxhat * inv_std.reshape(bshape)
        n = dout.size // self.num_channels
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)


@register
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, key=None):
        self._cache = x > 0
        return np.maximum(x, x.dtype.type(0))

    def backward(self, dout, need_input_grad=True):
        mask = self._pop_cache()
        return np.where(mask, dout, dout.dtype.type(0)) if need_input_grad else None


@register
class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""

    kind = "dropout"

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigError(f"dropout p must be in [0, 1), got {p}")
        self.p = p

    def spec(self):
        return {"kind": self.kind, "p": self.p}

    def forward(self, x, train, key=None):
        if not train or self.p == 0:
            self._cache = (None,)
            return x
        rng = np.random.default_rng(key)
        keep = 1.0 - self.p
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        self._cache = (mask,)
        return x * mask

    def backward(self, dout, need_input_grad=True):
        (mask,) = self._pop_cache()
        if not need_input_grad:
            return None
        return dout if mask is None else dout * mask


@register
class GlobalAvgPool(Layer):
    """Mean over the spatial axes: (B, C, H, W) -> (B, C, 1, 1)."""

    kind = "global-avg-pool"

    def forward(self, x, train, key=None):
        if x.ndim != 4:
            raise ShapeError(f"expected 4-D input, got {x.shape}", repr(self))
        self._cache = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout, need_input_grad=True):
        shape = self._pop_cache()
        if not need_input_grad:
            return None
        return np.broadcast_to(dout / (shape[2] * shape[3]), shape).copy()


@register
class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train, key=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, need_input_grad=True):
        shape = self._pop_cache()
        return dout.reshape(shape) if need_input_grad else None


@register
class ResidualBlock(Layer):
    """Pre-activation residual block: ``x + conv(relu(bn(conv(relu(bn(x))))))``.

    Both convolutions are 3x3, stride 1, "same" padding, so the skip path is
    a pure identity. With both conv weights at zero the block is the
    identity in value and gradient.
    """

    kind = "residual-block"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.branch = [
            ("bn1", BatchNorm2d(channels, momentum, eps)),
            ("relu1", ReLU()),
            ("conv1", Conv2d(channels, channels, 3, 1, "same")),
            ("bn2", BatchNorm2d(channels, momentum, eps)),
            ("relu2", ReLU()),
            ("conv2", Conv2d(channels, channels, 3, 1, "same")),
        ]

    def params(self):
        return [(f"{n}.{pn}", p) for n, layer in self.branch for pn, p in layer.params()]

    def buffers(self):
        return [(f"{n}.{bn}", b) for n, layer in self.branch for bn, b in layer.buffers()]

    def set_buffer(self, name, value):
        sub, _, rest = name.partition(".")
        dict(self.branch)[sub].set_buffer(rest, value)

    def init_params(self, rng, dtype):
        for _, layer in self.branch:
            layer.init_params(rng, dtype)

    def astype(self, dtype):
        for _, layer in self.branch:
            layer.astype(dtype)

    def spec(self):
        bn = self.branch[0][1]
        return {"kind": self.kind, "channels": self.channels, "momentum": bn.momentum, "eps": bn.eps}

    def forward(self, x, train, key=None):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected input (B, {self.channels}, H, W), got {x.shape}", repr(self))
        h = x
        for _, layer in self.branch:
            h = layer.forward(h, train)
        self._cache = True
        return x + h

    def backward(self, dout, need_input_grad=True):
        self._pop_cache()
        g = dout
        last = len(self.branch) - 1
        for i in range(last, -1, -1):
            # the first branch layer only needs an input grad if the caller does
            g = self.branch[i][1].backward(g, need_input_grad or i > 0)
        return dout + g if need_input_grad else None

    def clear_cache(self):
        self._cache = None
        for _, layer in self.branch:
            layer.clear_cache()


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)
