from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Tensor:
    """Dense array with an optional same-shaped gradient.

    Used for every learnable parameter. Activations flow between layers as
    plain ndarrays; only parameters need to carry ``grad`` and ``trainable``.
    """

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, name: str = "", trainable: bool = True):
        self.data = np.ascontiguousarray(data)
        if self.data.ndim == 0 or 0 in self.data.shape:
            raise ShapeError(f"tensor {name!r} needs positive extents, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}", self.name)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), self.name, self.trainable)
        if self.grad is not None:
            t.grad = self.grad.astype(dtype)
        return t

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"
