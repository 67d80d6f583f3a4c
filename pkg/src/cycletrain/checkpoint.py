"""Single-file checkpoint: magic, version, JSON manifest, float32 blob.

Layout (all integers little-endian)::

    8 bytes   magic b"CYTRCKPT"
    u32       format version
    u64       manifest length M
    M bytes   UTF-8 JSON manifest (sorted keys)
    rest      concatenated little-endian float32 arrays, in manifest order

The manifest lists every tensor's name, role, shape and element offset,
the network's layer specs and trainable flags, seeds, the dropout counter,
the optimizer step counter and the blob's SHA-256. Output bytes depend only
on the saved state, so identical states give identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .nn.network import Network
from .optim import AdamWState

MAGIC = b"CYTRCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_LE_F32 = np.dtype("<f4")


def _tensor_entries(net: Network, state: AdamWState | None):
    out = [("param", n, p.data) for n, p in net.named_parameters()]
    out += [("buffer", n, b) for n, b in net.named_buffers()]
    if state is not None:
        for n in sorted(state.m):
            out.append(("adam_m", n, state.m[n]))
            out.append(("adam_v", n, state.v[n]))
    return out


def dumps(net: Network, state: AdamWState | None = None, extra: dict | None = None) -> bytes:
    entries = _tensor_entries(net, state)
    tensors, chunks, offset = [], [], 0
    for role, name, arr in entries:
        a = np.ascontiguousarray(arr, dtype=_LE_F32)
        tensors.append({"role": role, "name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": VERSION,
        "dtype": "float32-le",
        "network": {
            "seed": net.seed,
            "forward_count": net.forward_count,
            "meta": net.meta,
            "groups": net.specs(),
            "trainable": [[p.trainable for p in net.parameters(g)] for g in range(net.num_groups)],
        },
        "optimizer": None if state is None else {"t": state.t},
        "tensors": tensors,
        "blob_elements": offset,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + blob


def save_checkpoint(path, net: Network, state: AdamWState | None = None, extra: dict | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    data = dumps(net, state, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse(data: bytes) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Validate and decode checkpoint bytes into ``(manifest, {(role, name): array})``."""
    if len(data) < _HEADER.size:
        raise CheckpointError(f"truncated header: {len(data)} of {_HEADER.size} bytes", offset=len(data))
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a checkpoint file", offset=0)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})", offset=8)
    start = _HEADER.size
    if len(data) < start + mlen:
        raise CheckpointError(f"truncated manifest: need {mlen} bytes", offset=len(data))
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"manifest is not UTF-8: {exc.reason}", offset=start + exc.start) from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest: {exc.msg}", offset=start + exc.pos) from None
    try:
        n = int(manifest["blob_elements"])
        tensors = manifest["tensors"]
        manifest["network"]["groups"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"manifest missing field {exc}", offset=start) from None
    blob_start = start + mlen
    blob = data[blob_start:]
    if len(blob) != 4 * n:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest declares {4 * n}",
                              offset=blob_start + min(len(blob), 4 * n))
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointError("blob checksum mismatch", offset=blob_start)
    flat = np.frombuffer(blob, dtype=_LE_F32)
    arrays = {}
    for t in tensors:
        size = int(np.prod(t["shape"], dtype=np.int64))
        off = int(t["offset"])
        if off < 0 or off + size > n:
            raise CheckpointError(f"tensor {t['name']} lies outside the blob", offset=blob_start + 4 * off)
        arrays[(t["role"], t["name"])] = flat[off:off + size].reshape(t["shape"]).astype(np.float32)
    return manifest, arrays


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _describe(net: Network, name: str) -> str:
    layer = int(name.split(".")[1][1:])
    return f"{name} [{net.layer_name(layer)}]"


def _assign(net: Network, arrays, trainable=None) -> None:
    """Shape-check everything first, then write; the network is untouched on error."""
    params = net.named_parameters()
    buffers = net.named_buffers()
    for name, p in params:
        a = arrays.get(("param", name))
        if a is None:
            raise ShapeError("parameter missing from checkpoint", _describe(net, name))
        if a.shape != p.shape:
            raise ShapeError(f"checkpoint shape {a.shape} != network shape {p.shape}", _describe(net, name))
    for name, b in buffers:
        a = arrays.get(("buffer", name))
        if a is None:
            raise ShapeError("buffer missing from checkpoint", _describe(net, name))
        if a.shape != b.shape:
            raise ShapeError(f"checkpoint shape {a.shape} != network shape {b.shape}", _describe(net, name))
    expected = {("param", n) for n, _ in params} | {("buffer", n) for n, _ in buffers}
    extra = sorted(n for r, n in arrays if r in ("param", "buffer") and (r, n) not in expected)
    if extra:
        raise ShapeError(f"checkpoint has tensors the network lacks: {', '.join(extra[:3])}", "network")
    for name, p in params:
        p.data = arrays[("param", name)].astype(net.dtype)
        p.grad = None
    for name, _ in buffers:
        net.set_buffer(name, arrays[("buffer", name)].astype(net.dtype))
    if trainable is not None:
        for g, flags in enumerate(trainable):
            for p, flag in zip(net.parameters(g), flags):
                p.trainable = bool(flag)


def load_checkpoint(path) -> tuple[Network, AdamWState | None, dict]:
    """Rebuild network, optimizer state and the ``extra`` dict from a checkpoint."""
    manifest, arrays = parse(_read(path))
    nm = manifest["network"]
    try:
        net = Network.from_specs(nm["groups"], seed=nm["seed"], meta=nm.get("meta"))
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid layer specs: {exc}") from exc
    _assign(net, arrays, nm.get("trainable"))
    net.forward_count = int(nm.get("forward_count", 0))
    state = None
    if manifest.get("optimizer") is not None:
        state = AdamWState(t=int(manifest["optimizer"]["t"]))
        for (role, name), a in arrays.items():
            if role == "adam_m":
                state.m[name] = a
            elif role == "adam_v":
                state.v[name] = a
    return net, state, manifest.get("extra", {})


def load_external_weights(net: Network, path) -> None:
    """Overwrite ``net``'s parameters and running stats from a checkpoint file.

    Shapes are matched by qualified parameter name. Nothing is written unless
    the whole file parses and every shape matches.
    """
    _, arrays = parse(_read(path))
    _assign(net, arrays)
