"""Dense containers, snapshot reshaping and the on-disk formats for sequences.

Real tensors are plain ``float64`` numpy arrays and complex tensors are
``complex128`` arrays. On disk complex data is written as two planes
(real, then imaginary) sharing one header.

MDT layout (little endian)::

    b"MDT1" | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u64 dims | payload

MDTC is identical except for the magic and a second payload block holding
the imaginary plane.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

MAGIC_REAL = b"MDT1"
MAGIC_COMPLEX = b"MDTC"
MAX_ELEMENTS = 1 << 48

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


class BadMagic(TensorFormatError):
    pass


class Truncated(TensorFormatError):
    pass


class DimOverflow(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


class MissingColumn(ManifestError):
    pass


class BadNumber(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class HeartState(str, enum.Enum):
    CTL = "CTL"
    OB = "OB"
    SH = "SH"
    OTHER = "Other"


class SplitHint(str, enum.Enum):
    TRAIN = "Train"
    VAL = "Val"
    TEST = "Test"


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    width: int
    height: int

    def fits(self, shape: tuple[int, int]) -> bool:
        return (self.x >= 0 and self.y >= 0 and self.width >= 1 and self.height >= 1
                and self.x + self.width <= shape[0] and self.y + self.height <= shape[1])


@dataclass(frozen=True)
class SequenceAnnotation:
    sequence_id: str
    heart_state: str
    failure_age_months: float
    roi: Optional[Roi] = None
    split_hint: Optional[SplitHint] = None

    @property
    def state(self) -> HeartState:
        try:
            return HeartState(self.heart_state)
        except ValueError:
            return HeartState.OTHER


@dataclass
class VideoSequence:
    """A homogenized clip: ``frames`` has shape (N_x, N_y, K)."""

    frames: np.ndarray
    dt_seconds: float
    annotation: SequenceAnnotation = field(
        default_factory=lambda: SequenceAnnotation("seq", "CTL", 0.0))

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise ValueError(f"frames must be (N_x, N_y, K), got {self.frames.shape}")
        if not self.dt_seconds > 0:
            raise ValueError("dt_seconds must be positive")
        roi = self.annotation.roi
        if roi is not None and not roi.fits(self.frames.shape[:2]):
            raise ValueError(f"roi {roi} outside frame bounds {self.frames.shape[:2]}")

    @property
    def n_snapshots(self) -> int:
        return self.frames.shape[2]

    @property
    def sequence_id(self) -> str:
        return self.annotation.sequence_id


def reshape_to_snapshot_matrix(seq: VideoSequence | np.ndarray) -> np.ndarray:
    """Flatten every frame row-major into one column of an (N_p, K) matrix."""
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq, dtype=np.float64)
    nx, ny, k = frames.shape
    return np.array(frames.reshape(nx * ny, k), dtype=np.float64, copy=True)


def snapshot_matrix_to_frames(mat: np.ndarray, nx: int, ny: int) -> np.ndarray:
    return np.array(mat.reshape(nx, ny, mat.shape[1]), copy=True)


# -- MDT containers ---------------------------------------------------------

def _header(magic: bytes, shape: tuple[int, ...]) -> bytes:
    if len(shape) > 255:
        raise DimOverflow(f"too many dimensions: {len(shape)}")
    return magic + struct.pack("<BB", 1, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def dump_tensor(arr: np.ndarray, fh: BinaryIO) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if min(arr.shape) < 1:
        raise ValueError("tensor dims must all be >= 1")
    if np.iscomplexobj(arr):
        fh.write(_header(MAGIC_COMPLEX, arr.shape))
        fh.write(np.ascontiguousarray(arr.real, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(arr.imag, dtype="<f8").tobytes())
    else:
        fh.write(_header(MAGIC_REAL, arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise Truncated(f"expected {n} bytes of {what}, got {len(buf)}")
    return buf


def load_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one MDT1/MDTC block from an open stream."""
    magic = fh.read(4)
    if magic not in (MAGIC_REAL, MAGIC_COMPLEX):
        raise BadMagic(f"unknown magic {magic!r}")
    dtype_code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if dtype_code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {dtype_code}")
    if ndim == 0:
        raise TensorFormatError("ndim must be >= 1")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims"))
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero-sized dimension in {dims}")
    count = math.prod(dims)
    if count > MAX_ELEMENTS:
        raise DimOverflow(f"dims {dims} describe {count} elements")
    dtype = _DTYPES[dtype_code]
    planes = 2 if magic == MAGIC_COMPLEX else 1
    out = []
    for _ in range(planes):
        raw = _read_exact(fh, count * dtype.itemsize, "payload")
        out.append(np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(dims))
    if planes == 2:
        return out[0] + 1j * out[1]
    return out[0]


def write_tensor_file(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        dump_tensor(arr, fh)


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = load_tensor(fh)
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after payload")
    return arr


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    dump_tensor(arr, buf)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return load_tensor(io.BytesIO(data))


# -- manifest ---------------------------------------------------------------

MANIFEST_COLUMNS = ["sequence_id", "path", "heart_state", "failure_age_months",
                    "roi_x", "roi_y", "roi_w", "roi_h", "split_hint"]
_REQUIRED = ["sequence_id", "path", "heart_state", "failure_age_months"]
_SPLIT_ALIASES = {"train": SplitHint.TRAIN, "val": SplitHint.VAL,
                  "validation": SplitHint.VAL, "test": SplitHint.TEST}


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise BadNumber(f"line {line}: column {column!r} has non-numeric value {value!r}") from None
    if not math.isfinite(out):
        raise BadNumber(f"line {line}: column {column!r} is not finite")
    return out


def _parse_int(value: str, column: str, line: int) -> int:
    out = _parse_float(value, column, line)
    if out != int(out):
        raise BadNumber(f"line {line}: column {column!r} must be an integer, got {value!r}")
    return int(out)


def read_manifest(path) -> list[tuple[Path, SequenceAnnotation]]:
    """Parse a sequence manifest CSV; relative paths resolve against its folder."""
    path = Path(path)
    base = path.parent
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in _REQUIRED:
            if col not in header:
                raise MissingColumn(f"{path}: missing required column {col!r}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["sequence_id"].strip()
            if not sid:
                raise ManifestError(f"line {lineno}: empty sequence_id")
            if sid in seen:
                raise DuplicateId(f"line {lineno}: duplicate sequence_id {sid!r}")
            seen.add(sid)
            age = _parse_float(row["failure_age_months"].strip(), "failure_age_months", lineno)
            if age < 0:
                raise BadNumber(f"line {lineno}: failure_age_months must be non-negative")
            roi_vals = [(row.get(c) or "").strip() for c in ("roi_x", "roi_y", "roi_w", "roi_h")]
            roi = None
            if any(roi_vals):
                if not all(roi_vals):
                    raise BadNumber(f"line {lineno}: roi columns must be all set or all empty")
                roi = Roi(*(_parse_int(v, c, lineno)
                            for v, c in zip(roi_vals, ("roi_x", "roi_y", "roi_w", "roi_h"))))
            hint_raw = (row.get("split_hint") or "").strip()
            hint = None
            if hint_raw:
                if hint_raw.lower() not in _SPLIT_ALIASES:
                    raise ManifestError(f"line {lineno}: unknown split_hint {hint_raw!r}")
                hint = _SPLIT_ALIASES[hint_raw.lower()]
            seq_path = Path(row["path"].strip())
            if not seq_path.is_absolute():
                seq_path = base / seq_path
            records.append((seq_path, SequenceAnnotation(
                sequence_id=sid, heart_state=row["heart_state"].strip(),
                failure_age_months=age, roi=roi, split_hint=hint)))
    return records


def write_manifest(path, rows: list[tuple[str, SequenceAnnotation]]) -> None:
    """Write ``(relative path, annotation)`` rows in manifest column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for rel, ann in rows:
            roi = ann.roi
            w.writerow([ann.sequence_id, str(rel), ann.heart_state, repr(float(ann.failure_age_months)),
                        *(("", "", "", "") if roi is None else (roi.x, roi.y, roi.width, roi.height)),
                        "" if ann.split_hint is None else ann.split_hint.value])


def load_sequence(path, annotation: SequenceAnnotation, dt_seconds: float = 0.004) -> VideoSequence:
    frames = read_tensor_file(path)
    if np.iscomplexobj(frames) or frames.ndim != 3:
        raise TensorFormatError(f"{path}: sequence must be a real 3-way tensor, got {frames.shape}")
    return VideoSequence(frames, dt_seconds, annotation)
