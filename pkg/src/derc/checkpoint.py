"""Binary model checkpoints.

Layout, all integers little-endian::

    b"DERC" | u32 version | u32 n | config JSON (n bytes)
            | u32 m | manifest JSON (m bytes) | float64 '<f8' parameter blob

The manifest lists ``[name, shape]`` pairs in blob order, so a reader can
validate sizes before touching the data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from derc.corpus import atomic_write_bytes
from derc.errors import DataError
from derc.model import DialogueModel, ModelConfig
from derc.numerics import Tensor

MAGIC = b"DERC"
FORMAT_VERSION = 1


def _block(payload: dict) -> bytes:
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(model: DialogueModel, meta: dict | None = None) -> bytes:
    names = list(model.params)
    manifest = [[n, list(model.params[n].shape)] for n in names]
    blob = b"".join(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names)
    config = {"model": model.config.to_dict(), "meta": meta or {}}
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + _block(config) + _block({"params": manifest}) + blob


def _read_block(buf: bytes, offset: int, what: str) -> tuple[dict, int]:
    if offset + 4 > len(buf):
        raise DataError(f"checkpoint truncated before {what} block")
    (n,) = struct.unpack_from("<I", buf, offset)
    start, end = offset + 4, offset + 4 + n
    if end > len(buf):
        raise DataError(f"checkpoint truncated inside {what} block")
    try:
        return json.loads(buf[start:end].decode("utf-8")), end
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {what} block is not valid JSON: {exc}") from None


def loads(buf: bytes) -> tuple[DialogueModel, dict]:
    """Inverse of :func:`dumps`; returns the model and the stored metadata."""
    if buf[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    config, off = _read_block(buf, 8, "config")
    manifest, off = _read_block(buf, off, "manifest")
    params = {}
    for name, shape in manifest["params"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(buf):
            raise DataError(f"checkpoint blob truncated at parameter {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
        off = end
    if off != len(buf):
        raise DataError(f"checkpoint has {len(buf) - off} trailing bytes")
    return DialogueModel(ModelConfig(**config["model"]), params), config.get("meta", {})


def save(model: DialogueModel, path, meta: dict | None = None) -> None:
    atomic_write_bytes(Path(path), dumps(model, meta))


def load(path) -> tuple[DialogueModel, dict]:
    return loads(Path(path).read_bytes())
