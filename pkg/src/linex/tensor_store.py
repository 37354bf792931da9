"""LNXT checkpoint files and trajectory manifests.

Layout (all integers little-endian)::

    magic   b"LNXT"
    u32     version (1)
    u64     step
    u64     tensor count
    table   per tensor: u32 name length, name bytes (UTF-8), u8 dtype code,
            u8 rank, rank x u64 dims, u64 data offset, u64 data length
    data    64-byte aligned payloads; offsets are absolute file positions

Readers parse the table once and then seek to individual payloads, so memory
use is bounded by the largest tensor requested rather than the file size.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"LNXT"
VERSION = 1
ALIGNMENT = 64

__all__ = [
    "DType",
    "TensorMeta",
    "Checkpoint",
    "CheckpointReader",
    "Trajectory",
    "FormatError",
    "CorruptionError",
    "SchemaError",
    "TensorNotFoundError",
    "bf16_round",
    "bf16_bits_to_f32",
    "write_checkpoint",
    "read_tensor",
    "read_checkpoint",
    "load_trajectory",
    "save_trajectory",
]


class FormatError(ValueError):
    """The file is not an LNXT checkpoint of a supported version."""


class CorruptionError(ValueError):
    """The file is truncated or its table points outside the file."""


class SchemaError(ValueError):
    """Checkpoints or manifests disagree with each other or with the rules."""


class TensorNotFoundError(KeyError):
    def __init__(self, name: str, available: Iterable[str], path=None):
        self.name = name
        self.available = sorted(available)
        where = f" in {path}" if path is not None else ""
        msg = f"tensor {name!r} not found{where}; available: {', '.join(self.available)}"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class DType(IntEnum):
    F32 = 0
    F64 = 1
    BF16 = 2

    @property
    def itemsize(self) -> int:
        return {DType.F32: 4, DType.F64: 8, DType.BF16: 2}[self]

    @property
    def storage(self) -> np.dtype:
        return {DType.F32: np.dtype("<f4"), DType.F64: np.dtype("<f8"), DType.BF16: np.dtype("<u2")}[self]

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        dt = np.dtype(value)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise ValueError(f"unsupported dtype {value!r}")


def bf16_round(values) -> np.ndarray:
    """Round float values to bfloat16 bit patterns (round-to-nearest-even).

    Returns the raw ``uint16`` words. Inputs are first narrowed to float32.
    """
    f32 = np.ascontiguousarray(values, dtype=np.float32)
    bits = f32.view(np.uint32).astype(np.uint64)
    bias = ((bits >> 16) & 1) + 0x7FFF
    return ((bits + bias) >> 16).astype(np.uint16)


def bf16_bits_to_f32(words) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint16)
    return (words.astype(np.uint32) << 16).view(np.float32)


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    dims: tuple[int, ...]
    data_offset: int = 0
    data_len: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize


@dataclass
class Checkpoint:
    """Named tensors at one training step.

    ``tensors`` maps names to arrays; ``dtypes`` optionally overrides the
    storage dtype per tensor (default: F32 for float32 arrays, F64 for float64).
    """

    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    dtypes: dict[str, DType] = field(default_factory=dict)

    def dtype_of(self, name: str) -> DType:
        if name in self.dtypes:
            return DType.parse(self.dtypes[name])
        arr = np.asarray(self.tensors[name])
        return DType.F64 if arr.dtype == np.float64 else DType.F32


def _encode_payload(arr: np.ndarray, dtype: DType) -> bytes:
    if dtype is DType.BF16:
        return bf16_round(arr).astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype=dtype.storage).tobytes()


def _pad(n: int) -> int:
    return (-n) % ALIGNMENT


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize ``ckpt`` to ``path``. Identical inputs give identical bytes."""
    if isinstance(ckpt.tensors, Mapping):
        items = list(ckpt.tensors.items())
    else:
        items = list(ckpt.tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise SchemaError(f"duplicate tensor names: {', '.join(dupes)}")
    if ckpt.step < 0:
        raise ValueError("step must be non-negative")
    items.sort(key=lambda kv: kv[0])

    metas, payloads = [], []
    for name, value in items:
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        dtype = DType.parse(ckpt.dtypes[name]) if name in ckpt.dtypes else (
            DType.F64 if arr.dtype == np.float64 else DType.F32)
        payloads.append(_encode_payload(arr, dtype))
        metas.append((name.encode("utf-8"), dtype, tuple(int(d) for d in arr.shape)))

    table_len = sum(4 + len(nb) + 1 + 1 + 8 * len(dims) + 16 for nb, _, dims in metas)
    offset = 4 + 4 + 8 + 8 + table_len
    offset += _pad(offset)
    offsets = []
    for payload in payloads:
        offsets.append(offset)
        offset += len(payload)
        offset += _pad(offset)

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IQQ", VERSION, ckpt.step, len(metas))
    for (name_b, dtype, dims), off, payload in zip(metas, offsets, payloads):
        buf += struct.pack("<I", len(name_b)) + name_b
        buf += struct.pack("<BB", int(dtype), len(dims))
        buf += struct.pack(f"<{len(dims)}Q", *dims)
        buf += struct.pack("<QQ", off, len(payload))
    for off, payload in zip(offsets, payloads):
        buf += b"\x00" * (off - len(buf))
        buf += payload
    buf += b"\x00" * _pad(len(buf))

    try:
        with open(path, "wb") as fh:
            fh.write(buf)
    except OSError as exc:
        raise OSError(f"failed writing checkpoint {path}: {exc}") from exc


class CheckpointReader:
    """Parsed table of one checkpoint file; payloads are read on demand."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._size = os.path.getsize(self.path)
            with open(self.path, "rb") as fh:
                self._parse(fh)
        except OSError as exc:
            raise OSError(f"failed reading checkpoint {self.path}: {exc}") from exc

    def _read_exact(self, fh, n: int) -> bytes:
        data = fh.read(n)
        if len(data) != n:
            raise CorruptionError(f"{self.path}: truncated header")
        return data

    def _parse(self, fh) -> None:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise FormatError(f"{self.path}: bad magic, not an LNXT file")
        (version,) = struct.unpack("<I", head[4:])
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")
        self.step, count = struct.unpack("<QQ", self._read_exact(fh, 16))
        metas = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", self._read_exact(fh, 4))
            name = self._read_exact(fh, nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", self._read_exact(fh, 2))
            try:
                dtype = DType(code)
            except ValueError:
                raise FormatError(f"{self.path}: unknown dtype code {code} for {name!r}") from None
            dims = struct.unpack(f"<{rank}Q", self._read_exact(fh, 8 * rank))
            off, length = struct.unpack("<QQ", self._read_exact(fh, 16))
            meta = TensorMeta(name, dtype, tuple(dims), off, length)
            if length != meta.nbytes:
                raise CorruptionError(f"{self.path}: tensor {name!r} length {length} != {meta.nbytes}")
            if off + length > self._size:
                raise CorruptionError(f"{self.path}: tensor {name!r} extends past end of file")
            metas[name] = meta
        self.metas: dict[str, TensorMeta] = metas

    @property
    def names(self) -> list[str]:
        return list(self.metas)

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {name: meta.dims for name, meta in self.metas.items()}

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.metas[name]
        except KeyError:
            raise TensorNotFoundError(name, self.metas, self.path) from None

    def read_raw(self, name: str) -> np.ndarray:
        """Payload in its storage dtype (BF16 as uint16 words), shaped."""
        meta = self.meta(name)
        with open(self.path, "rb") as fh:
            fh.seek(meta.data_offset)
            data = fh.read(meta.data_len)
        if len(data) != meta.data_len:
            raise CorruptionError(f"{self.path}: truncated payload for {name!r}")
        return np.frombuffer(data, dtype=meta.dtype.storage).reshape(meta.dims)

    def read(self, name: str) -> np.ndarray:
        """Values widened to float64, shaped."""
        raw = self.read_raw(name)
        if self.metas[name].dtype is DType.BF16:
            return bf16_bits_to_f32(raw).astype(np.float64)
        return raw.astype(np.float64)

    def read_native(self, name: str) -> np.ndarray:
        """Values in their natural numpy dtype (float32 for F32 and BF16)."""
        raw = self.read_raw(name)
        if self.metas[name].dtype is DType.BF16:
            return bf16_bits_to_f32(raw).copy()
        return raw.copy()


def read_tensor(path, name: str) -> tuple[TensorMeta, np.ndarray]:
    """Read one tensor as ``(meta, flat float64 values)``."""
    reader = CheckpointReader(path)
    return reader.meta(name), reader.read(name).reshape(-1)


def read_checkpoint(path) -> Checkpoint:
    reader = CheckpointReader(path)
    return Checkpoint(
        step=reader.step,
        tensors={name: reader.read_native(name) for name in reader.names},
        dtypes={name: meta.dtype for name, meta in reader.metas.items()},
    )


@dataclass
class Trajectory:
    run_id: str
    entries: list[tuple[int, Path]]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = [(int(s), Path(p)) for s, p in self.entries]
        steps = self.steps
        for a, b in zip(steps, steps[1:]):
            if b <= a:
                raise SchemaError(f"trajectory steps must be strictly increasing, got {a} then {b}")

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def path_at(self, step: int) -> Path:
        for s, p in self.entries:
            if s == step:
                return p
        raise KeyError(f"no checkpoint at step {step}; steps: {self.steps}")

    def reader(self, step: int) -> CheckpointReader:
        return CheckpointReader(self.path_at(step))

    def after(self, warmup_steps: int) -> "Trajectory":
        """Drop checkpoints with step < ``warmup_steps``."""
        kept = [(s, p) for s, p in self.entries if s >= warmup_steps]
        return Trajectory(self.run_id, kept, dict(self.metadata))


def save_trajectory(traj: Trajectory, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = []
    for step, p in traj.entries:
        p = Path(p)
        try:
            rel = p.resolve().relative_to(root.resolve())
        except ValueError:
            rel = p
        entries.append({"step": step, "file": rel.as_posix()})
    doc = {"run_id": traj.run_id, "entries": entries,
           "metadata": {str(k): str(v) for k, v in traj.metadata.items()}}
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_trajectory(manifest_path) -> Trajectory:
    """Load and validate a ``trajectory.json`` manifest.

    Every referenced checkpoint must exist and share one name/shape schema.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "trajectory.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: invalid JSON: {exc}") from exc
    for key in ("run_id", "entries"):
        if key not in doc:
            raise SchemaError(f"{manifest_path}: missing field {key!r}")
    metadata = doc.get("metadata", {}) or {}
    if not all(isinstance(v, str) for v in metadata.values()):
        raise SchemaError(f"{manifest_path}: metadata values must be strings")

    root = manifest_path.parent
    entries = []
    for i, entry in enumerate(doc["entries"]):
        try:
            step, rel = int(entry["step"]), entry["file"]
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{manifest_path}: malformed entry #{i}: {entry!r}") from None
        entries.append((step, root / rel))
    traj = Trajectory(str(doc["run_id"]), entries, dict(metadata))

    ref_schema, ref_path = None, None
    for _, path in traj.entries:
        if not path.exists():
            raise SchemaError(f"{manifest_path}: checkpoint file not found: {path}")
        schema = CheckpointReader(path).schema()
        if ref_schema is None:
            ref_schema, ref_path = schema, path
            continue
        for name in sorted(set(ref_schema) | set(schema)):
            if ref_schema.get(name) != schema.get(name):
                raise SchemaError(
                    f"schema mismatch on tensor {name!r}: {ref_path} has "
                    f"{ref_schema.get(name)}, {path} has {schema.get(name)}")
    return traj
