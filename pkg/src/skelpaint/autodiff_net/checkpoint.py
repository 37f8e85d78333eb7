"""Binary checkpoint container for repaint models.

Layout (little-endian)::

    b"SKPT"  u32 version
    u32 header_len  header (UTF-8 JSON: scheme, net config, extra metadata)
    u32 n_blobs
    per blob: u32 name_len, name, u32 ndim, ndim * u64 shape, float64 data (C order)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import NetConfig, RepaintModel

MAGIC = b"SKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_blobs(header: dict, blobs: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(head)), head, struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f8")
        key = name.encode("utf-8")
        out += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim)]
        out += [struct.pack("<Q", d) for d in arr.shape]
        out.append(arr.tobytes())
    return b"".join(out)


def load_blobs(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a skelpaint checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = bytes(take(klen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last blob")
    return header, blobs


def save_checkpoint(path: str | os.PathLike, models: dict[str, RepaintModel] | RepaintModel,
                    extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write one or more stream models (plus optional named arrays) to ``path``."""
    if isinstance(models, RepaintModel):
        models = {models.scheme: models}
    header = {"streams": {}, "extra": extra or {}}
    blobs = {}
    for stream, m in models.items():
        header["streams"][stream] = {
            "scheme": m.scheme,
            "input_mode": m.input_mode,
            "hint_ratio": m.hint_ratio,
            "config": m.config.to_dict(),
        }
        for name, value in m.state().items():
            blobs[f"{stream}/{name}"] = value
    for name, value in (arrays or {}).items():
        blobs[f"_/{name}"] = np.asarray(value, dtype=np.float64)
    Path(path).write_bytes(dump_blobs(header, blobs))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, RepaintModel], dict, dict[str, np.ndarray]]:
    header, blobs = load_blobs(Path(path).read_bytes())
    models = {}
    for stream, info in header["streams"].items():
        m = RepaintModel(NetConfig.from_dict(info["config"]), {}, info["scheme"],
                         info.get("input_mode", "raw"), info.get("hint_ratio", 0.5))
        prefix = f"{stream}/"
        m.load_state({k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)})
        models[stream] = m
    arrays = {k[2:]: v for k, v in blobs.items() if k.startswith("_/")}
    return models, header.get("extra", {}), arrays
