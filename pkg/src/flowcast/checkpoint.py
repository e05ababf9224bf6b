"""Single-file checkpoint container.

Layout: magic, format version, JSON header (kind, config snapshot, JSON-able
state skeleton, tensor directory), raw little-endian tensor payload, then a
sha256 hex digest of everything before it. Tensors live wherever they appear
in the nested state object; the skeleton marks their slots and the directory
records name, dtype tag, shape, and offset. Loading verifies the digest and
the format version before touching the payload.
"""

from __future__ import annotations

import hashlib
import json
import numpy as np
import torch

MAGIC = b"FLCK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    """Corrupt file, digest mismatch, unsupported version, or incompatible config."""


def _flatten(obj, prefix, tensors):
    """Replace tensors in a nested structure by slot markers, collecting them."""
    if torch.is_tensor(obj):
        name = prefix
        tensors[name] = obj.detach().cpu().contiguous()
        return {"__tensor__": name}
    if isinstance(obj, np.ndarray):
        return _flatten(torch.from_numpy(obj), prefix, tensors)
    if isinstance(obj, dict):
        return {str(k): _flatten(v, f"{prefix}.{k}", tensors) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_flatten(v, f"{prefix}.{i}", tensors) for i, v in enumerate(obj)]
        return {"__list__": out} if isinstance(obj, list) else {"__tuple__": out}
    if isinstance(obj, (int, float, str, bool)) or obj is None:
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__} at {prefix}")


def _unflatten(node, tensors):
    if isinstance(node, dict):
        if "__tensor__" in node:
            return tensors[node["__tensor__"]]
        if "__list__" in node:
            return [_unflatten(v, tensors) for v in node["__list__"]]
        if "__tuple__" in node:
            return tuple(_unflatten(v, tensors) for v in node["__tuple__"])
        return {k: _unflatten(v, tensors) for k, v in node.items()}
    return node


def save_checkpoint(path, state, config_flat, kind):
    """Write state (nested dict, tensors allowed anywhere) with a config snapshot."""
    tensors = {}
    skeleton = _flatten(state, "state", tensors)
    directory = []
    offset = 0
    payload_parts = []
    for name in sorted(tensors):
        t = tensors[name]
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        tag = _DTYPES[t.dtype]
        arr = t.numpy()
        if tag[0] == "<":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": tag, "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
        payload_parts.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": dict(config_flat), "state": skeleton,
         "tensors": directory},
        sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += MAGIC
    blob += FORMAT_VERSION.to_bytes(4, "little")
    blob += len(header).to_bytes(8, "little")
    blob += header
    blob += b"".join(payload_parts)
    digest = hashlib.sha256(bytes(blob)).hexdigest().encode()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))
        fh.write(digest)
    return digest.decode()


def load_checkpoint(path, expected_kind=None):
    """Verify digest and version, then rebuild (kind, config_flat, state)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 + 64:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = blob[:-64], blob[-64:]
    actual = hashlib.sha256(body).hexdigest().encode()
    if actual != digest:
        raise CheckpointError(f"{path}: content digest mismatch (corrupt or truncated)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(body[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    hlen = int.from_bytes(body[8:16], "little")
    header = json.loads(body[16:16 + hlen].decode())
    payload = body[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(
            _TORCH_DTYPES[entry["dtype"]])
    state = _unflatten(header["state"], tensors)
    if expected_kind is not None and header["kind"] != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {header['kind']!r}, expected {expected_kind!r}")
    return header["kind"], header["config"], state


def file_digest(path):
    """The stored digest (verifying it on the way)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    body, digest = blob[:-64], blob[-64:]
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: content digest mismatch")
    return digest.decode()


def ensure_compatible(saved_config, current_config, keys):
    """Raise naming the first differing key between two flat config dicts."""
    for key in keys:
        a, b = saved_config.get(key), current_config.get(key)
        if a != b:
            raise CheckpointError(
                f"checkpoint/config mismatch on {key}: checkpoint has {a!r}, "
                f"config has {b!r}")


def rng_capture():
    """JSON/tensor-able snapshot of the torch global rng."""
    return {"torch": torch.get_rng_state()}


def rng_restore(snapshot):
    torch.set_rng_state(snapshot["torch"].to(torch.uint8))
