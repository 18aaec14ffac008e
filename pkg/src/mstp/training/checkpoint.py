"""Binary checkpoints: a named-tensor table plus raw float32 payload.

Layout (all integers little-endian):

    8 bytes   magic ``MSTPCKPT``
    u32       version (currently 1)
    u32       entry count
    per entry:
        u16 + utf8   parameter name
        u16 + utf8   group name
        u8           trainable flag (as of save time)
        u8           rank, then u32 per dimension
        u64          byte offset into the payload
    u64       payload size in bytes
    payload   concatenated raw ``<f4`` buffers

Loading is strict: the checkpoint's name set and shapes must match the
target registry exactly, and every structural inconsistency is reported by
name rather than as a generic failure.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..errors import CheckpointError
from .registry import ParamRegistry

MAGIC = b"MSTPCKPT"
VERSION = 1


@dataclasses.dataclass
class CheckpointEntry:
    name: str
    group: str
    trainable: bool
    shape: Tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        n = 4
        for d in self.shape:
            n *= d
        return n


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long to serialize: {s[:40]}...")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_checkpoint(path, registry: ParamRegistry) -> None:
    entries = []
    offset = 0
    for name, group, tensor in registry.items():
        data = np.ascontiguousarray(tensor.data, dtype=np.float32)
        entries.append((name, group, tensor.requires_grad, data))
        offset += data.nbytes
    payload_size = offset

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        offset = 0
        for name, group, trainable, data in entries:
            _write_str(fh, name)
            _write_str(fh, group)
            fh.write(struct.pack("<BB", int(trainable), data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(struct.pack("<Q", offset))
            offset += data.nbytes
        fh.write(struct.pack("<Q", payload_size))
        for _, _, _, data in entries:
            fh.write(data.astype("<f4", copy=False).tobytes())


def _parse(path) -> Tuple[List[CheckpointEntry], int, int]:
    """Returns (entries, header_end, payload_size), fully validated."""
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        entries = []
        for _ in range(count):
            name = _read_str(fh, "entry name")
            group = _read_str(fh, "entry group")
            trainable, ndim = struct.unpack("<BB", _read_exact(fh, 2, name))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, name))
            (offset,) = struct.unpack("<Q", _read_exact(fh, 8, name))
            entries.append(CheckpointEntry(name, group, bool(trainable),
                                           tuple(int(d) for d in shape), offset))
        (payload_size,) = struct.unpack("<Q", _read_exact(fh, 8, "payload size"))
        header_end = fh.tell()

    names = [e.name for e in entries]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise CheckpointError(f"duplicate parameter names in checkpoint: {sorted(dupes)}")
    for e in entries:
        if e.offset + e.nbytes > payload_size:
            raise CheckpointError(f"entry {e.name!r} extends past the payload")
    actual = path.stat().st_size
    if actual != header_end + payload_size:
        raise CheckpointError(
            f"checkpoint size mismatch: header says {header_end + payload_size} bytes, "
            f"file has {actual}")
    return entries, header_end, payload_size


def read_table(path) -> List[CheckpointEntry]:
    """Parse and validate the header table without touching the payload."""
    return _parse(path)[0]


def load_checkpoint(path, registry: ParamRegistry,
                    restore_trainable: bool = False) -> List[CheckpointEntry]:
    """Load parameter values into `registry`'s tensors, strictly by name."""
    entries, header_end, payload_size = _parse(path)
    by_name = {e.name: e for e in entries}
    reg_names = set(registry.names())
    ckpt_names = set(by_name)
    missing = sorted(reg_names - ckpt_names)
    unexpected = sorted(ckpt_names - reg_names)
    if missing or unexpected:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if unexpected:
            parts.append(f"unexpected {unexpected}")
        raise CheckpointError("checkpoint does not match the model: " + "; ".join(parts))

    mismatched = []
    for name in registry.names():
        want = tuple(registry.tensor(name).shape)
        got = by_name[name].shape
        if want != got:
            mismatched.append(f"{name}: checkpoint {got} vs model {want}")
    if mismatched:
        raise CheckpointError("shape mismatch: " + "; ".join(mismatched))

    with open(path, "rb") as fh:
        data = fh.read()
    payload = data[header_end:header_end + payload_size]
    for name in registry.names():
        e = by_name[name]
        raw = payload[e.offset:e.offset + e.nbytes]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e.shape)
        tensor = registry.tensor(name)
        tensor.data = arr.astype(np.float32).copy()
        if restore_trainable:
            tensor.requires_grad = e.trainable
    return entries
