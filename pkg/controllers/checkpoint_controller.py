"""
Checkpoint persistence for model parameters and BN running statistics.

Layout, all little-endian:

    magic b"CLKB" | version u32 | fingerprint u64
    repeated: name length u32 | name bytes | dtype tag u8 | rank u8 | dims u32 x rank | values
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from data.enums import FileConstants, Precision
from data.errors import CheckpointError
from models.arch_spec import ArchSpec, build_arch_spec
from models.network import ModelState, units_for

log = structlog.get_logger(__name__)

_HEADER = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")
_TAG_RANK = struct.Struct("<BB")

_DTYPE_TAGS: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
}
_TAG_FOR_KIND = {(dtype.kind, dtype.itemsize): tag for tag, dtype in _DTYPE_TAGS.items()}


@dataclass
class CheckpointContents:
    """Raw decoded checkpoint."""

    version: int
    fingerprint: int
    records: dict[str, np.ndarray]

    def arch_description(self) -> Optional[dict]:
        raw = self.records.get(FileConstants.ARCH_RECORD)
        if raw is None:
            return None
        try:
            return json.loads(raw.tobytes().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Unreadable {FileConstants.ARCH_RECORD} record: {e}") from e


def _encode_record(name: str, value: np.ndarray) -> bytes:
    tag = _TAG_FOR_KIND.get((value.dtype.kind, value.dtype.itemsize))
    if tag is None:
        raise CheckpointError(f"Cannot store {name} with dtype {value.dtype}")
    encoded_name = name.encode("utf-8")
    parts = [
        _U32.pack(len(encoded_name)),
        encoded_name,
        _TAG_RANK.pack(tag, value.ndim),
        b"".join(_U32.pack(dim) for dim in value.shape),
        np.ascontiguousarray(value, dtype=_DTYPE_TAGS[tag]).tobytes(),
    ]
    return b"".join(parts)


def encode_checkpoint(model: ModelState) -> bytes:
    """Serialize parameters, then buffers, then the architecture record."""
    records = [_HEADER.pack(FileConstants.CHECKPOINT_MAGIC, FileConstants.CHECKPOINT_VERSION, model.fingerprint)]
    for name, value in model.params.items():
        records.append(_encode_record(name, value))
    for name, value in model.buffers.items():
        records.append(_encode_record(name, value))
    description = json.dumps(model.spec.describe(), sort_keys=True).encode("utf-8")
    records.append(_encode_record(FileConstants.ARCH_RECORD, np.frombuffer(description, dtype=np.uint8)))
    return b"".join(records)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.raw[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    @property
    def done(self) -> bool:
        return self.offset >= len(self.raw)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> CheckpointContents:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On bad magic, unknown version or dtype, or truncation
    """
    reader = _Reader(raw, source)
    magic, version, fingerprint = reader.unpack(_HEADER)
    if magic != FileConstants.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != FileConstants.CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")

    records: dict[str, np.ndarray] = {}
    while not reader.done:
        (name_length,) = reader.unpack(_U32)
        name = reader.take(name_length).decode("utf-8")
        tag, rank = reader.unpack(_TAG_RANK)
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{source}: record {name} has unknown dtype tag {tag}")
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        records[name] = values.astype(dtype.newbyteorder("="), copy=True)
    return CheckpointContents(version=version, fingerprint=fingerprint, records=records)


def _create_backup(path: Path) -> Optional[Path]:
    """Copy an existing file to ``<name>.backup`` before it is overwritten."""
    backup_path = path.with_name(path.name + FileConstants.BACKUP_SUFFIX)
    try:
        shutil.copy2(path, backup_path)
        return backup_path
    except OSError as e:
        log.warning("could not create backup", path=str(path), error=str(e))
        return None


def checkpoint_save(model: ModelState, path: Path) -> Path:
    """
    Write a checkpoint atomically.

    Args:
        model: Model to store
        path: Destination file; an existing file is first kept as ``<name>.backup``

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        _create_backup(path)

    tmp_path = path.with_name(path.name + ".tmp")
    with tmp_path.open("wb") as f:
        f.write(encode_checkpoint(model))
    os.replace(tmp_path, path)
    log.debug("checkpoint saved", path=str(path), fingerprint=model.fingerprint)
    return path


def _spec_from(contents: CheckpointContents, source: str) -> ArchSpec:
    description = contents.arch_description()
    if description is None:
        raise CheckpointError(f"{source}: no {FileConstants.ARCH_RECORD} record; pass the architecture explicitly")
    arguments = dict(description)
    arch = arguments.pop("arch", None)
    if arch is None:
        raise CheckpointError(f"{source}: architecture record {description} has no arch name")
    try:
        return build_arch_spec(arch, **arguments)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{source}: invalid architecture record {description}: {e}") from e


def checkpoint_load(path: Path, spec: Optional[ArchSpec] = None) -> ModelState:
    """
    Restore a model from disk.

    Args:
        path: Checkpoint file
        spec: Expected architecture; rebuilt from the ``meta.arch`` record when omitted

    Returns:
        ModelState with exactly the stored parameters and running statistics

    Raises:
        CheckpointError: Missing file, malformed contents or fingerprint mismatch
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    contents = decode_checkpoint(path.read_bytes(), source=str(path))
    if spec is None:
        spec = _spec_from(contents, str(path))
    if contents.fingerprint != spec.fingerprint:
        raise CheckpointError(
            f"{path}: fingerprint {contents.fingerprint:#018x} does not match "
            f"{spec.name}/{spec.attention} ({spec.fingerprint:#018x})"
        )

    records = {name: value for name, value in contents.records.items() if name != FileConstants.ARCH_RECORD}
    params, buffers, roles = {}, {}, {}
    for unit in units_for(spec):
        for param in unit.param_specs():
            params[param.name] = _take(records, param.name, param.shape, path)
            roles[param.name] = param.role
        for buffer in unit.buffer_specs():
            buffers[buffer.name] = _take(records, buffer.name, buffer.shape, path)
    if records:
        raise CheckpointError(f"{path}: unexpected records {sorted(records)[:5]}")

    precision = Precision.of(next(iter(params.values())))
    model = ModelState(spec=spec, params=params, roles=roles, buffers=buffers, precision=precision)
    log.debug("checkpoint loaded", path=str(path), arch=spec.name, attention=spec.attention)
    return model


def _take(records: dict[str, np.ndarray], name: str, shape: tuple[int, ...], path: Path) -> np.ndarray:
    value = records.pop(name, None)
    if value is None:
        raise CheckpointError(f"{path}: missing record {name}")
    if value.shape != shape:
        raise CheckpointError(f"{path}: record {name} has shape {value.shape}, expected {shape}")
    return value
