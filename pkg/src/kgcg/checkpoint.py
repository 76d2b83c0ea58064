"""Self-describing binary checkpoints.

Layout::

    b"KGCG" | u32 LE version (=1) | u64 LE header length | JSON header | payload

The JSON header carries ``model_cfg`` and a ``tensors`` manifest mapping each name to
``{"shape", "offset", "nbytes"}``; offsets are relative to the payload start and the
payloads are little-endian float32, concatenated in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np
import torch

from kgcg.model import ModelConfig, Params

MAGIC = b"KGCG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: Params
    model_cfg: ModelConfig
    vocab: list[str] | None = None
    adam_m: Params | None = None
    adam_v: Params | None = None
    meta: dict = field(default_factory=dict)


def _to_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def save_checkpoint(params: Params, model_cfg: ModelConfig, path: str | Path, *, vocab=None,
                    adam_m: Params | None = None, adam_v: Params | None = None, meta: dict | None = None) -> None:
    tensors: dict[str, torch.Tensor] = dict(params)
    if adam_m is not None:
        tensors.update({f"adam.m.{k}": v for k, v in adam_m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in adam_v.items()})
    manifest, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        blob = _to_bytes(t)
        manifest[name] = {"shape": list(t.shape), "offset": offset, "nbytes": len(blob)}
        chunks.append(blob)
        offset += len(blob)
    header = {"model_cfg": model_cfg.to_dict(), "tensors": manifest}
    if vocab is not None:
        header["vocab"] = list(vocab)
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks))


def read_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
        manifest = header["tensors"]
        cfg = ModelConfig.from_dict(header["model_cfg"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: unreadable header ({exc})") from exc

    payload = memoryview(raw)[start:]
    expected = 0
    for name, entry in manifest.items():
        count = prod(entry["shape"])
        if count * 4 != entry["nbytes"]:
            raise ManifestError(
                f"{path}: tensor {name!r} declares shape {entry['shape']} "
                f"({count * 4} bytes) but a payload of {entry['nbytes']} bytes")
        if entry["offset"] != expected:
            raise ManifestError(f"{path}: tensor {name!r} offset {entry['offset']} breaks manifest order")
        expected += entry["nbytes"]
    if len(payload) < expected:
        raise TruncatedCheckpointError(f"{path}: payload has {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise ManifestError(f"{path}: {len(payload) - expected} trailing bytes after the last tensor")

    tensors = {}
    for name, entry in manifest.items():
        arr = np.frombuffer(payload, dtype="<f4", count=prod(entry["shape"]), offset=entry["offset"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))

    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: t for k, t in tensors.items() if k.startswith("adam.v.")}
    return Checkpoint(params, cfg, header.get("vocab"), m or None, v or None, header.get("meta", {}))


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig]:
    ck = read_checkpoint(path)
    return ck.params, ck.model_cfg
