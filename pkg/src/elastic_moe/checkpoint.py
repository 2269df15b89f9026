"""Binary model checkpoints.

Layout: magic ``MMOE``, little-endian u32 format version, little-endian u64
header length, a UTF-8 JSON header (model config, strategy config, step,
extra metadata, and a tensor index mapping name -> shape and byte offset),
then raw little-endian float32 tensor payloads in index order. The payload
section starts at the first 64-byte-aligned file offset after the header and
every tensor offset (relative to that base) is 64-byte aligned; padding is
zero bytes, so identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import Model, ModelConfig

MAGIC = b"MMOE"
VERSION = 1
ALIGN = 64


def _align(offset: int) -> int:
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def save_checkpoint(model: Model, meta: dict | None, path) -> None:
    """Serialize ``model`` (cast to float32) plus metadata to ``path``."""
    meta = dict(meta or {})
    params = model.parameters()
    index: dict[str, dict] = {}
    offset = 0
    for p in params:
        offset = _align(offset)
        index[p.name] = {"shape": list(p.value.shape), "offset": offset}
        offset += p.value.data.size * 4

    header = {
        "model": model.cfg.to_dict(),
        "strategy": meta.pop("strategy", None),
        "step": meta.pop("step", 0),
        "extra": meta,
        "tensors": index,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    prefix_len = len(MAGIC) + 4 + 8 + len(header_bytes)
    payload_base = _align(prefix_len)

    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(b"\x00" * (payload_base - prefix_len))
        pos = 0
        for p in params:
            target = index[p.name]["offset"]
            f.write(b"\x00" * (target - pos))
            payload = np.ascontiguousarray(p.value.data, dtype="<f4").tobytes()
            f.write(payload)
            pos = target + len(payload)


def read_header(path) -> dict:
    """Parse and validate the checkpoint header without loading tensors."""
    with open(path, "rb") as f:
        prefix = f.read(len(MAGIC) + 4 + 8)
        if len(prefix) < len(MAGIC) + 4 + 8:
            raise CheckpointFormatError(f"{path}: truncated before header")
        if prefix[: len(MAGIC)] != MAGIC:
            raise CheckpointFormatError(
                f"{path}: bad magic {prefix[:len(MAGIC)]!r}, expected {MAGIC!r}"
            )
        (version,) = struct.unpack("<I", prefix[len(MAGIC) : len(MAGIC) + 4])
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<Q", prefix[len(MAGIC) + 4 :])
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise CheckpointFormatError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    header["_payload_base"] = _align(len(MAGIC) + 4 + 8 + header_len)
    return header


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model from ``path``; returns (model, metadata).

    Metadata carries the strategy config, step, and any extra fields stored
    at save time; passing it back to save_checkpoint reproduces the file
    byte for byte.
    """
    header = read_header(path)
    payload_base = header.pop("_payload_base")
    cfg = ModelConfig.from_dict(header["model"])
    model = Model(cfg)
    params = model.parameters()
    index = header.get("tensors", {})
    if set(index) != {p.name for p in params}:
        missing = {p.name for p in params} - set(index)
        extra = set(index) - {p.name for p in params}
        raise CheckpointFormatError(
            f"{path}: tensor index mismatch (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})"
        )
    with open(path, "rb") as f:
        for p in params:
            entry = index[p.name]
            shape = tuple(entry["shape"])
            if shape != p.value.shape:
                raise CheckpointFormatError(
                    f"{path}: tensor {p.name!r} has shape {shape}, model expects {p.value.shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            f.seek(payload_base + entry["offset"])
            raw = f.read(count * 4)
            if len(raw) < count * 4:
                raise CheckpointFormatError(f"{path}: truncated payload for {p.name!r}")
            p.value.data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            p.adam_m = np.zeros_like(p.value.data)
            p.adam_v = np.zeros_like(p.value.data)
    meta = {
        "strategy": header.get("strategy"),
        "step": header.get("step", 0),
        **header.get("extra", {}),
    }
    model._mask_cache.clear()
    return model, meta
