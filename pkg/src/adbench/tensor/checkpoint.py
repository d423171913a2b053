"""Binary checkpoint format with a JSON manifest sidecar.

Layout (all integers little-endian u32)::

    magic "ADBCKPT\\0" | version | len + model id | len + config hash | n blocks
    per block: len + name | ndim | dims... | float32 LE payload

The sidecar ``<path>.json`` lists every block with its shape and byte offset.
"""
import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"ADBCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n):
    return struct.pack("<I", n)


def _str(s):
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def save_checkpoint(path, state, model_id, config_hash, extra=None):
    path = str(path)
    parts = [MAGIC, _u32(FORMAT_VERSION), _str(model_id), _str(config_hash), _u32(len(state))]
    offset = sum(len(p) for p in parts)
    manifest = []
    for name, arr in state.items():
        arr = np.asarray(arr)
        head = _str(name) + _u32(arr.ndim) + b"".join(_u32(d) for d in arr.shape)
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset + len(head)})
        parts += [head, payload]
        offset += len(head) + len(payload)
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "model_id": model_id,
        "config_hash": config_hash,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "blocks": manifest,
    }
    if extra:
        sidecar["extra"] = extra
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar


def load_checkpoint(path):
    """Return (state, header) where header has model_id, config_hash, format_version."""
    with open(str(path), "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    def string():
        return take(u32()).decode("utf-8")

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = {"format_version": version, "model_id": string(), "config_hash": string()}
    state = OrderedDict()
    for _ in range(u32()):
        name = string()
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return state, header


def state_hash(state):
    """sha256 over names, shapes and raw bytes; used to prove no mutation."""
    h = hashlib.sha256()
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
