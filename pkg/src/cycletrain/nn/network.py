from __future__ import annotations

import copy
import hashlib

import numpy as np

from ..errors import BackwardError, NonFiniteError, ShapeError
from .layers import Layer, layer_from_spec
from .tensor import Tensor


class Network:
    """Ordered list of layer groups, input-nearest group first, head last.

    Groups are the unit of freezing and of discriminative learning rates.
    Dropout masks are drawn from ``(seed, forward_count, layer index)`` so a
    forward pass is reproducible from the network state alone, which is what
    makes checkpoint resume bitwise exact.
    """

    def __init__(self, groups: list[list[Layer]], seed: int = 0, dtype=np.float32,
                 meta: dict | None = None):
        if not groups or any(not g for g in groups):
            raise ValueError("a network needs at least one non-empty group")
        self.groups = groups
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.mode = "train"
        self.forward_count = 0
        self.meta = dict(meta or {})
        self._pending = None

    # -- structure ---------------------------------------------------------

    def layers(self):
        """Yield ``(global_index, group_index, layer)`` in forward order."""
        i = 0
        for g, group in enumerate(self.groups):
            for layer in group:
                yield i, g, layer
                i += 1

    def named_parameters(self, group: int | None = None) -> list[tuple[str, Tensor]]:
        out = []
        for i, g, layer in self.layers():
            if group is not None and g != group:
                continue
            out.extend((f"g{g}.l{i}.{name}", p) for name, p in layer.params())
        return out

    def parameters(self, group: int | None = None) -> list[Tensor]:
        return [p for _, p in self.named_parameters(group)]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"g{g}.l{i}.{name}", b) for i, g, layer in self.layers() for name, b in layer.buffers()]

    def set_buffer(self, qualified: str, value: np.ndarray) -> None:
        _, l_part, name = qualified.split(".", 2)
        idx = int(l_part[1:])
        layer = next(layer for i, _, layer in self.layers() if i == idx)
        layer.set_buffer(name, value)

    def layer_name(self, index: int) -> str:
        for i, g, layer in self.layers():
            if i == index:
                return f"group {g} layer {i} ({layer.kind})"
        return f"layer {index}"

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def specs(self) -> list[list[dict]]:
        return [[layer.spec() for layer in group] for group in self.groups]

    @classmethod
    def from_specs(cls, specs, seed=0, dtype=np.float32, meta=None) -> "Network":
        groups = [[layer_from_spec(s) for s in group] for group in specs]
        net = cls(groups, seed=seed, dtype=np.float32, meta=meta)
        return net.astype(dtype) if np.dtype(dtype) != np.float32 else net

    # -- modes & flags ------------------------------------------------------

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def group_trainable(self, group: int) -> bool:
        return any(p.trainable for p in self.parameters(group))

    def set_group_trainable(self, group: int, trainable: bool) -> None:
        for p in self.parameters(group):
            p.trainable = trainable
            if not trainable:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- passes --------------------------------------------------------------

    def forward(self, batch, record: bool = True) -> np.ndarray:
        """Logits for a B x C x H x W batch.

        Softmax is left to the loss. ``record=False`` skips caching for
        inference-only calls (no backward possible afterwards).
        """
        x = batch.data if isinstance(batch, Tensor) else batch
        x = np.asarray(x, dtype=self.dtype)
        expected = self.meta.get("in_channels")
        if expected is not None and (x.ndim != 4 or x.shape[1] != expected):
            raise ShapeError(f"expected batch (B, {expected}, H, W), got {x.shape}", "network input")
        train = self.mode == "train"
        for i, _, layer in self.layers():
            try:
                x = layer.forward(x, train, key=(self.seed, self.forward_count, i))
            except ShapeError as exc:
                self._abort()
                raise ShapeError(f"{self.layer_name(i)}: {exc}", exc.layer) from exc
            if not np.isfinite(x).all():
                self._abort()
                raise NonFiniteError(f"non-finite activation after {self.layer_name(i)}", layer_index=i)
        if train:
            self.forward_count += 1
        if record:
            self._pending = x.shape
        else:
            self._abort()
        return x

    __call__ = forward

    def _abort(self) -> None:
        for _, _, layer in self.layers():
            layer.clear_cache()
        self._pending = None

    def backward(self, grad_logits) -> None:
        """Accumulate d(loss)/d(param) into ``.grad`` of every trainable parameter.

        Backpropagation stops at the lowest layer that still owns a trainable
        parameter, so frozen bodies cost nothing beyond their forward pass.
        """
        g = grad_logits.data if isinstance(grad_logits, Tensor) else grad_logits
        if self._pending is None:
            raise BackwardError("backward called without a matching forward")
        if g.shape != self._pending:
            raise ShapeError(f"grad_logits shape {g.shape} != logits shape {self._pending}", "network output")
        g = np.asarray(g, dtype=self.dtype)
        layers = list(self.layers())
        lowest = next((i for i, _, layer in layers if any(p.trainable for _, p in layer.params())), None)
        if lowest is None:
            self._abort()
            return
        for i, _, layer in reversed(layers):
            g = layer.backward(g, need_input_grad=i > lowest)
            if i == lowest:
                break
        self._abort()
        for name, p in self.named_parameters():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for {name}", name=name)

    def predict(self, batch) -> np.ndarray:
        """Argmax class per row; ties go to the smaller class index."""
        mode = self.mode
        self.eval()
        try:
            logits = self.forward(batch, record=False)
        finally:
            self.mode = mode
        return np.argmax(logits, axis=1)

    # -- copies & fingerprints ---------------------------------------------

    def copy(self) -> "Network":
        self._abort()
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for _, _, layer in net.layers():
            layer.astype(dtype)
        net.dtype = np.dtype(dtype)
        return net

    def checksum(self, groups=None, buffers: bool = False) -> str:
        """SHA-256 over parameter bytes (and optionally running stats)."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            g = int(name.split(".", 1)[0][1:])
            if groups is None or g in groups:
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        if buffers:
            for name, b in self.named_buffers():
                h.update(name.encode())
                h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def __repr__(self):
        lines = [f"Network(seed={self.seed}, dtype={self.dtype}, mode={self.mode})"]
        for g, group in enumerate(self.groups):
            frozen = "" if self.group_trainable(g) or not self.parameters(g) else " [frozen]"
            lines.append(f"  group {g}{frozen}:")
            lines.extend(f"    {layer!r}" for layer in group)
        return "\n".join(lines)
