"""Parameter-map algebra and bit-exact checkpoint files.

A model state is a plain ``dict[str, np.ndarray]`` (a named parameter map
in fixed sorted-key order). This module provides differences between two
states, scaled application of a difference onto a state, a binary
checkpoint file format with CRC32 integrity, and a JSONL ledger that
indexes checkpoints by how many training tokens the model had consumed
when each was written.

Checkpoint file layout (all integers little-endian):

    magic           4 bytes  b"MSCK"
    version         u32      1
    tensor_count    u32
    per tensor:
        name_len    u16
        name        UTF-8 bytes
        dtype       u8       0 = float32
        rank        u8
        dims        rank x u64
        payload     raw little-endian float32 data
    metadata_len    u32
    metadata        UTF-8 JSON {tokens_seen, step, run_id, stage_tag, created_at}
    crc32           u32      CRC32 of every byte preceding this field

Files are written atomically (temp file + rename in the same directory).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MSCK"
VERSION = 1
_DTYPE_F32 = 0

NamedParamMap = dict  # name -> np.ndarray, keys in sorted order


class CkptError(Exception):
    pass


class SchemaError(CkptError):
    """Two parameter maps do not share the same key set / shapes."""


class BadMagicError(CkptError):
    pass


class VersionError(CkptError):
    pass


class TruncatedError(CkptError):
    pass


class ChecksumError(CkptError):
    pass


class DtypeError(CkptError):
    pass


class LedgerError(CkptError):
    pass


class LedgerLookupError(LedgerError):
    """No checkpoint satisfies the tokens-seen bound."""


# ---------------------------------------------------------------------------
# state algebra


def check_same_schema(a: dict, b: dict) -> None:
    if a.keys() != b.keys():
        only_a = sorted(a.keys() - b.keys())
        only_b = sorted(b.keys() - a.keys())
        raise SchemaError(f"key sets differ; only in first: {only_a}, only in second: {only_b}")
    bad = [k for k in a if a[k].shape != b[k].shape]
    if bad:
        raise SchemaError(f"shape mismatch for keys: {sorted(bad)}")


@dataclass
class StateDelta:
    """A same-schema map of tensor differences between two model states."""

    entries: dict

    def keys(self):
        return self.entries.keys()


def delta(a: dict, b: dict, compute_dtype=None) -> StateDelta:
    """Elementwise b - a over identical schemas.

    ``compute_dtype=np.float64`` performs the subtraction in float64 (exact
    for float32 inputs) and keeps float64 entries, for use with
    ``apply(..., compute_dtype=np.float64)`` when algebraic cancellation
    must be bit-exact.
    """
    check_same_schema(a, b)
    if compute_dtype is None:
        return StateDelta({k: b[k] - a[k] for k in sorted(a)})
    cd = np.dtype(compute_dtype)
    return StateDelta({k: b[k].astype(cd) - a[k].astype(cd) for k in sorted(a)})


def apply(theta: dict, d: StateDelta, scale: float, compute_dtype=None) -> dict:
    """Return theta + scale * d without touching the inputs.

    With ``compute_dtype=np.float64`` the arithmetic runs in float64 and the
    result is rounded back to each parameter's own dtype; combined with a
    float64 delta this makes exact cancellations (scale -1 of a recorded
    difference) land bit-exactly on the original state.
    """
    if not np.isfinite(scale):
        raise ValueError(f"non-finite scale {scale!r}")
    check_same_schema(theta, d.entries)
    out = {}
    for k in sorted(theta):
        if compute_dtype is None:
            out[k] = theta[k] + theta[k].dtype.type(scale) * d.entries[k]
        else:
            cd = np.dtype(compute_dtype)
            acc = theta[k].astype(cd) + cd.type(scale) * d.entries[k].astype(cd)
            out[k] = acc.astype(theta[k].dtype)
    return out


def clone_state(theta: dict) -> dict:
    return {k: v.copy() for k, v in sorted(theta.items())}


# ---------------------------------------------------------------------------
# checkpoint records and files


@dataclass
class CheckpointRecord:
    params: dict
    tokens_seen: int = 0
    step: int = 0
    run_id: str = ""
    stage_tag: str = ""
    created_at: str = "1970-01-01T00:00:00+00:00"

    def metadata(self) -> dict:
        return {
            "created_at": self.created_at,
            "run_id": self.run_id,
            "stage_tag": self.stage_tag,
            "step": self.step,
            "tokens_seen": self.tokens_seen,
        }


def save(record: CheckpointRecord, path: str | Path) -> None:
    """Serialize a checkpoint; load(save(r)) is bit-exact including metadata."""
    path = Path(path)
    chunks: list[bytes] = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(record.params))]
    for name in sorted(record.params):
        arr = record.params[name]
        if arr.dtype != np.float32:
            raise DtypeError(f"checkpoint format stores float32 only, got {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(record.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    body = b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"file ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path: str | Path) -> CheckpointRecord:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 4 + 4 + 4:
        raise TruncatedError(f"file too short ({len(blob)} bytes)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    r = _Reader(blob[:-4])
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", r.take(4))[0]
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    count = struct.unpack("<I", r.take(4))[0]
    params: dict = {}
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", r.take(2))
        if dtype_code != _DTYPE_F32:
            raise DtypeError(f"unknown dtype code {dtype_code} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n_bytes = 4 * int(np.prod(dims)) if rank else 4
        payload = r.take(n_bytes)
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    meta_len = struct.unpack("<I", r.take(4))[0]
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    return CheckpointRecord(
        params=params,
        tokens_seen=meta["tokens_seen"],
        step=meta["step"],
        run_id=meta["run_id"],
        stage_tag=meta["stage_tag"],
        created_at=meta["created_at"],
    )


# ---------------------------------------------------------------------------
# ledger


@dataclass
class Ledger:
    """Ordered checkpoint index: one JSON object per line on disk.

    Entries hold {path, tokens_seen, step, stage_tag, run_id}; paths are
    stored relative to the ledger file and resolved against its directory.
    """

    path: Path
    entries: list = field(default_factory=list)

    @classmethod
    def open(cls, path: str | Path) -> "Ledger":
        path = Path(path)
        entries = []
        if path.exists():
            for line in path.read_text().splitlines():
                if line.strip():
                    entries.append(json.loads(line))
        toks = [e["tokens_seen"] for e in entries]
        if toks != sorted(toks):
            raise LedgerError(f"ledger {path} is not sorted by tokens_seen")
        return cls(path=path, entries=entries)

    def append(self, record: CheckpointRecord, ckpt_path: str | Path) -> None:
        ckpt_path = Path(ckpt_path)
        rel = os.path.relpath(ckpt_path, self.path.parent)
        entry = {
            "path": rel,
            "run_id": record.run_id,
            "stage_tag": record.stage_tag,
            "step": record.step,
            "tokens_seen": record.tokens_seen,
        }
        if self.entries and entry["tokens_seen"] < self.entries[-1]["tokens_seen"]:
            raise LedgerError("tokens_seen must be non-decreasing along the ledger")
        self.entries.append(entry)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")

    def resolve(self, entry: dict) -> Path:
        return (self.path.parent / entry["path"]).resolve()


def ledger_query(ledger: Ledger, max_tokens: int) -> CheckpointRecord:
    """Load the checkpoint with the largest tokens_seen <= max_tokens."""
    if not ledger.entries:
        raise LedgerLookupError("ledger is empty")
    best = None
    for e in ledger.entries:
        if e["tokens_seen"] <= max_tokens:
            best = e
    if best is None:
        raise LedgerLookupError(f"no checkpoint at or before {max_tokens} tokens")
    return load(ledger.resolve(best))
