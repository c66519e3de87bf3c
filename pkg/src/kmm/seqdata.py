"""Temporal embedding sequences, motion trajectories and their file formats.

Three on-disk encodings hold the same matrix:

* ``binary`` (``.kmm``): a 20-byte little-endian header (``b"KMM1"``, version,
  n_rows, n_cols, pad_len as uint32) followed by ``n_rows * n_cols`` float32
  values in row-major order.
* ``csv``: one token per line, no header row.  A non-zero ``pad_len`` lives in
  a sidecar ``<path>.meta.json``.
* ``json``: ``{"n_rows", "n_cols", "pad_len", "tokens"}``.

Storage is float32; every in-memory computation runs in float64.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"KMM1"
VERSION = 1
HEADER = struct.Struct("<4sIIII")

Format = Literal["binary", "csv", "json"]

_SUFFIX_FORMATS = {".kmm": "binary", ".bin": "binary", ".csv": "csv", ".json": "json"}


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """Token matrix ``X`` of shape ``(n_tokens, latent_dim)`` with trailing padding.

    The last ``pad_len`` rows are filler and never enter density, statistics or
    scan computations.  Construction only coerces shape and dtype; call
    :func:`validate` to check the remaining invariants.
    """

    tokens: np.ndarray
    pad_len: int = 0

    def __post_init__(self):
        arr = np.array(self.tokens, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"tokens must be a 2-D matrix, got shape {arr.shape}")
        object.__setattr__(self, "tokens", _readonly(arr))
        object.__setattr__(self, "pad_len", int(self.pad_len))

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_active(self) -> int:
        return self.n_tokens - self.pad_len

    @property
    def active(self) -> np.ndarray:
        """The non-padding rows (a read-only view)."""
        return self.tokens[: self.n_active]

    def with_tokens(self, tokens: np.ndarray) -> "EmbeddingSequence":
        return EmbeddingSequence(tokens, self.pad_len)

    def padded(self, extra: int, fill: float = 0.0) -> "EmbeddingSequence":
        """Append ``extra`` padding rows filled with ``fill``."""
        pad = np.full((extra, self.latent_dim), fill, dtype=np.float64)
        return EmbeddingSequence(np.vstack([self.tokens, pad]), self.pad_len + extra)


@dataclass(frozen=True, eq=False)
class MotionTrajectory:
    """Per-frame positions or features sampled at ``fps``."""

    frames: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"frames must be a non-empty 2-D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            row, col = np.argwhere(~np.isfinite(arr))[0]
            raise ValidationError(f"non-finite frame value at row {row}, column {col}")
        if not (np.isfinite(self.fps) and self.fps > 0):
            raise ValidationError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", _readonly(arr))
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SequenceFileHeader:
    magic: bytes
    version: int
    n_rows: int
    n_cols: int
    pad_len: int

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.n_rows, self.n_cols, self.pad_len)

    @classmethod
    def unpack(cls, raw: bytes) -> "SequenceFileHeader":
        if len(raw) < HEADER.size:
            raise FormatError(f"file too short for header: {len(raw)} bytes")
        return cls(*HEADER.unpack_from(raw))


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of :func:`validate`; truthy when every invariant holds."""

    ok: bool
    message: str = "ok"
    row: int | None = None
    col: int | None = None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        where = ""
        if self.row is not None:
            where = f" (row {self.row}" + (f", column {self.col})" if self.col is not None else ")")
        return self.message + where


def validate(seq: EmbeddingSequence) -> ValidationResult:
    """Return ok or the first violated invariant, with its location."""
    n, l = seq.tokens.shape
    if n < 1:
        return ValidationResult(False, "sequence has no tokens")
    if l < 1:
        return ValidationResult(False, "latent dimension is zero")
    if seq.pad_len < 0:
        return ValidationResult(False, f"negative pad_len {seq.pad_len}")
    if seq.pad_len >= n:
        return ValidationResult(False, "padding consumes entire sequence")
    bad = ~np.isfinite(seq.tokens)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        return ValidationResult(False, "non-finite entry", int(row), int(col))
    return ValidationResult(True)


def check(seq: EmbeddingSequence) -> EmbeddingSequence:
    """Raise :class:`ValidationError` unless ``seq`` is valid."""
    result = validate(seq)
    if not result:
        raise ValidationError(str(result))
    return seq


def infer_format(path: str | Path) -> Format:
    suffix = Path(path).suffix.lower()
    try:
        return _SUFFIX_FORMATS[suffix]
    except KeyError:
        raise FormatError(f"cannot infer format from suffix {suffix!r}; pass format explicitly") from None


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _f32_text(value: float) -> str:
    # shortest decimal that round-trips the float32 value
    return str(np.float32(value))


def _to_f32(matrix: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.asarray(matrix, dtype="<f4")
    if not np.all(np.isfinite(out)):
        row, col = np.argwhere(~np.isfinite(out))[0]
        raise ValidationError(f"value at row {row}, column {col} is not representable as float32")
    return out


def write_matrix(path: str | Path, matrix: np.ndarray, pad_len: int = 0) -> None:
    """Write a raw matrix in the ``.kmm`` binary framing."""
    data = _to_f32(np.atleast_2d(matrix))
    n_rows, n_cols = data.shape
    header = SequenceFileHeader(MAGIC, VERSION, n_rows, n_cols, pad_len)
    with open(path, "wb") as fh:
        fh.write(header.pack())
        fh.write(np.ascontiguousarray(data).tobytes())


def read_matrix(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a ``.kmm`` file; returns ``(float64 matrix, pad_len)``."""
    raw = Path(path).read_bytes()
    header = SequenceFileHeader.unpack(raw)
    if header.magic != MAGIC:
        raise FormatError(f"magic mismatch: expected {MAGIC!r}, found {header.magic!r}")
    if header.version != VERSION:
        raise FormatError(f"unsupported version {header.version}")
    payload = raw[HEADER.size:]
    expected = header.n_rows * header.n_cols * 4
    if len(payload) != expected:
        raise FormatError(
            f"dimension mismatch: header declares {header.n_rows}x{header.n_cols} "
            f"({expected} bytes), payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(header.n_rows, header.n_cols)
    return data.astype(np.float64), header.pad_len


def save_sequence(seq: EmbeddingSequence, path: str | Path, format: Format | None = None) -> None:
    path = Path(path)
    fmt = format or infer_format(path)
    check(seq)
    if fmt == "binary":
        write_matrix(path, seq.tokens, seq.pad_len)
    elif fmt == "csv":
        _to_f32(seq.tokens)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in seq.tokens:
                writer.writerow([_f32_text(v) for v in row])
        meta = _sidecar(path)
        if seq.pad_len:
            meta.write_text(json.dumps({"pad_len": seq.pad_len}) + "\n")
        elif meta.exists():
            meta.unlink()
    elif fmt == "json":
        _to_f32(seq.tokens)
        doc = {
            "n_rows": seq.n_tokens,
            "n_cols": seq.latent_dim,
            "pad_len": seq.pad_len,
            "tokens": [[float(_f32_text(v)) for v in row] for row in seq.tokens],
        }
        path.write_text(json.dumps(doc) + "\n")
    else:
        raise FormatError(f"unknown format {fmt!r}")


def read_sequence(path: str | Path, format: Format | None = None) -> EmbeddingSequence:
    """Parse a sequence file without checking invariants (see :func:`validate`)."""
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt == "binary":
        tokens, pad_len = read_matrix(path)
    elif fmt == "csv":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if len({len(r) for r in rows}) > 1:
            raise FormatError(f"{path}: rows have differing lengths")
        try:
            tokens = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        meta = _sidecar(path)
        pad_len = json.loads(meta.read_text())["pad_len"] if meta.exists() else 0
    elif fmt == "json":
        doc = json.loads(path.read_text())
        try:
            tokens = np.array(doc["tokens"], dtype=np.float64).reshape(doc["n_rows"], doc["n_cols"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from None
        pad_len = doc.get("pad_len", 0)
    else:
        raise FormatError(f"unknown format {fmt!r}")
    if fmt != "binary":
        # text holds the shortest float32 repr; parse back to that float32
        with np.errstate(over="ignore"):
            tokens = tokens.astype(np.float32).astype(np.float64)
    return EmbeddingSequence(tokens, pad_len)


def load_sequence(path: str | Path, format: Format | None = None) -> EmbeddingSequence:
    """Read and validate a sequence file."""
    return check(read_sequence(path, format))


def load_trajectory(path: str | Path, fps: float, format: Format | None = None) -> MotionTrajectory:
    """Load frames stored as a sequence file; padding rows are dropped."""
    seq = load_sequence(path, format)
    return MotionTrajectory(seq.active, fps)
