"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSFP"  u32 version
    u32 len  JSON metadata (model config, seed, training metadata)
    u32 record count
    per record: u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 payload
    u64 checksum of every preceding byte (BLAKE2b, 8-byte digest)

Optimizer moments are stored as extra records named ``adam.m/<param>`` and
``adam.v/<param>``; the step counter lives in the JSON metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .config import ModelConfig
from .errors import ChecksumError, FormatError, TruncatedFileError, VersionError
from .nn import ParamStore
from .optim import AdamState
from .tensor import Tensor

MAGIC = b"MSFP"
VERSION = 1
_M, _V = "adam.m/", "adam.v/"


@dataclass
class Checkpoint:
    store: ParamStore
    optimizer: AdamState | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack(f"<I{len(raw)}sI", len(raw), raw, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(store: ParamStore, optimizer: AdamState | None = None,
                     meta: dict[str, Any] | None = None) -> bytes:
    info = dict(meta or {})
    info["model"] = store.config.to_dict()
    info["seed"] = store.seed
    info["optimizer"] = None if optimizer is None else {"t": optimizer.t}
    blob = json.dumps(info, sort_keys=True, separators=(",", ":")).encode("utf-8")

    records = [_record(n, p.data) for n, p in store.items()]
    if optimizer is not None:
        for name in store.trainable():
            if name in optimizer.m:
                records.append(_record(_M + name, optimizer.m[name]))
                records.append(_record(_V + name, optimizer.v[name]))
    body = b"".join([MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
                     struct.pack("<I", len(records)), *records])
    return body + struct.pack("<Q", checksum(body))


def save_checkpoint(store: ParamStore, path, optimizer: AdamState | None = None,
                    meta: dict[str, Any] | None = None) -> None:
    data = checkpoint_bytes(store, optimizer, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not an MSFP checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt metadata: {e}") from None
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    body_end = r.pos
    stored = struct.unpack("<Q", r.take(8))[0]
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if checksum(buf[:body_end]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")

    try:
        cfg = ModelConfig.from_dict(meta.pop("model"))
        seed = meta.pop("seed")
        opt_info = meta.pop("optimizer")
    except KeyError as e:
        raise FormatError(f"metadata missing {e}") from None
    dtype = np.dtype(cfg.dtype)
    params = {n: Tensor(a.astype(dtype)) for n, a in arrays.items() if not n.startswith(("adam.",))}
    store = ParamStore(params, cfg, seed)
    optimizer = None
    if opt_info is not None:
        optimizer = AdamState(t=int(opt_info["t"]))
        for n, a in arrays.items():
            if n.startswith(_M):
                optimizer.m[n[len(_M):]] = a.astype(dtype)
            elif n.startswith(_V):
                optimizer.v[n[len(_V):]] = a.astype(dtype)
    return Checkpoint(store, optimizer, meta)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
