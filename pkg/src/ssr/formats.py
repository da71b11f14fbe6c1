"""Binary and text interchange formats.

Feature files ("SSRF") hold one little-endian float32 matrix with explicit
dimensions; checkpoints ("SSRC") hold a JSON config block plus named
tensors.  Alignments travel as JSON-lines and corpora are described by a
TSV manifest.  All writes go through a temp-file-plus-rename so partially
written files never appear under their final name.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .alignment import BoundaryIndices, FeatureSequence
from .errors import (
    BadMagicError,
    BadVersionError,
    InvalidDimensionError,
    ManifestError,
    TruncatedFileError,
)

FEATURE_MAGIC = b"SSRF"
CHECKPOINT_MAGIC = b"SSRC"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class _Reader:
    """Cursor over a byte buffer that raises TruncatedFileError on underrun."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: expected {count} more bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def _check_header(reader: _Reader, magic: bytes) -> None:
    got = reader.take(4)
    if got != magic:
        raise BadMagicError(f"{reader.path}: bad magic {got!r}, expected {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{reader.path}: unsupported version {version}")


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def save_feature_file(path, matrix) -> None:
    """Write a 2-D real matrix as little-endian float32, row-major."""
    arr = np.asarray(matrix)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidDimensionError(f"feature matrix must be 2-D and non-empty, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidDimensionError("feature matrix contains non-finite entries")
    n, dim = arr.shape
    payload = b"".join(
        (FEATURE_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(n), _U32.pack(dim),
         arr.astype("<f4").tobytes())
    )
    atomic_write_bytes(path, payload)


def load_feature_file(path, frame_duration_ms: float = 20.0) -> FeatureSequence:
    """Read a feature file back; exact round-trip of what was saved."""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), os.fspath(path))
    _check_header(reader, FEATURE_MAGIC)
    n = reader.u32()
    dim = reader.u32()
    if n < 1 or dim < 1:
        raise InvalidDimensionError(f"{reader.path}: invalid dimensions {n}x{dim}")
    raw = reader.take(4 * n * dim)
    if not reader.done():
        raise TruncatedFileError(
            f"{reader.path}: {len(reader.data) - reader.pos} trailing bytes after payload"
        )
    frames = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
    return FeatureSequence(frames, frame_duration_ms=frame_duration_ms)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    """Write a config block plus named float32 tensors (until end of file)."""
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(config_bytes)),
             config_bytes]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        name_bytes = name.encode("utf-8")
        parts.append(_U32.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_U32.pack(arr.ndim))
        for size in arr.shape:
            parts.append(_U32.pack(size))
        parts.append(arr.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Read back (config, tensors); tensors come out as float64 arrays."""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), os.fspath(path))
    _check_header(reader, CHECKPOINT_MAGIC)
    config_len = reader.u32()
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidDimensionError(f"{reader.path}: corrupt config block: {exc}") from exc
    tensors = {}
    while not reader.done():
        name_len = reader.u32()
        name = reader.take(name_len).decode("utf-8")
        rank = reader.u32()
        if rank > 8:
            raise InvalidDimensionError(f"{reader.path}: tensor {name} has rank {rank}")
        shape = tuple(reader.u32() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(4 * size)
        if name in tensors:
            raise InvalidDimensionError(f"{reader.path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return config, tensors


# ---------------------------------------------------------------------------
# Alignment records
# ---------------------------------------------------------------------------

ALIGN_BACKENDS = ("mas", "ctc", "cif")


@dataclass
class AlignmentRecord:
    utt_id: str
    num_tokens: int
    num_frames: int
    boundaries: BoundaryIndices
    backend: str

    def __post_init__(self):
        if self.backend not in ALIGN_BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.num_tokens != len(self.boundaries):
            raise ValueError(
                f"{self.utt_id}: m={self.num_tokens} but {len(self.boundaries)} boundaries"
            )
        if self.num_frames != self.boundaries.frame_count:
            raise ValueError(
                f"{self.utt_id}: n={self.num_frames} inconsistent with final boundary "
                f"{self.boundaries.indices[-1]}"
            )


def write_alignments(path, records) -> None:
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "utt_id": rec.utt_id,
                    "m": rec.num_tokens,
                    "n": rec.num_frames,
                    "boundaries": list(rec.boundaries.indices),
                    "backend": rec.backend,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_alignments(path) -> dict:
    """Read alignment JSONL into {utt_id: AlignmentRecord}."""
    records = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = AlignmentRecord(
                    utt_id=str(obj["utt_id"]),
                    num_tokens=int(obj["m"]),
                    num_frames=int(obj["n"]),
                    boundaries=BoundaryIndices(tuple(obj["boundaries"])),
                    backend=str(obj["backend"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ManifestError(f"{path}:{line_no}: bad alignment record: {exc}") from exc
            if rec.utt_id in records:
                raise ManifestError(f"{path}:{line_no}: duplicate utt_id {rec.utt_id!r}")
            records[rec.utt_id] = rec
    return records


# ---------------------------------------------------------------------------
# Manifests and token files
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    utt_id: str
    feature_path: str
    token_ids: Optional[tuple]  # inline ids, or None when tokens live in a file
    token_path: Optional[str]
    aux_path: Optional[str]  # backend-specific data (text encodings, weights)


def _parse_inline_ids(text: str) -> Optional[tuple]:
    parts = text.replace(",", " ").split()
    if not parts:
        return None
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        return None


def read_manifest(path) -> list:
    """Parse a TSV manifest of (utt_id, feature_path, tokens[, aux]).

    The tokens field is either inline integer ids (comma or space separated)
    or a path to a whitespace-separated token file.  Relative paths resolve
    against the manifest's directory; referenced files must exist.
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise ManifestError(
                    f"{path}:{line_no}: expected at least utt_id and feature path"
                )
            utt_id = fields[0].strip()
            if not utt_id:
                raise ManifestError(f"{path}:{line_no}: empty utt_id")
            if utt_id in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)

            feature_path = _resolve(base, fields[1].strip())
            if not os.path.exists(feature_path):
                raise ManifestError(f"{path}:{line_no}: missing feature file {feature_path}")

            token_ids = None
            token_path = None
            if len(fields) > 2 and fields[2].strip():
                raw = fields[2].strip()
                token_ids = _parse_inline_ids(raw)
                if token_ids is None:
                    token_path = _resolve(base, raw)
                    if not os.path.exists(token_path):
                        raise ManifestError(
                            f"{path}:{line_no}: missing token file {token_path}"
                        )

            aux_path = None
            if len(fields) > 3 and fields[3].strip():
                aux_path = _resolve(base, fields[3].strip())
                if not os.path.exists(aux_path):
                    raise ManifestError(f"{path}:{line_no}: missing aux file {aux_path}")

            rows.append(ManifestRow(utt_id, feature_path, token_ids, token_path, aux_path))
    if not rows:
        raise ManifestError(f"{path}: manifest has no usable rows")
    return rows


def _resolve(base: str, maybe_relative: str) -> str:
    if os.path.isabs(maybe_relative):
        return maybe_relative
    return os.path.join(base, maybe_relative)


def read_token_ids(path) -> tuple:
    """Whitespace-separated integer ids from a text file."""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    parts = text.split()
    if not parts:
        raise ManifestError(f"{path}: token file is empty")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ManifestError(f"{path}: token file must contain integers: {exc}") from exc


def manifest_tokens(row: ManifestRow) -> tuple:
    if row.token_ids is not None:
        return row.token_ids
    if row.token_path is not None:
        return read_token_ids(row.token_path)
    raise ManifestError(f"{row.utt_id}: manifest row carries no tokens")
