"""Dense fact memory: the HMNM on-disk format and batched score computation.

A memory is an immutable N x d float32 matrix. Scores are always accumulated
in float64 so the batched (BLAS) and sequential (compiled loop) paths agree
within 1e-6 relative; ties anywhere downstream break toward the lower row
index.

HMNM file layout (little-endian):
    bytes 0-3   magic b"HMNM"
    bytes 4-7   version u32 = 1
    bytes 8-11  N u32
    bytes 12-15 d u32
    then        N*d IEEE-754 binary32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, ValidationError

MAGIC = b"HMNM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class MemoryMatrix:
    """Fixed fact memory: N rows of d float32 components."""

    values: np.ndarray
    _f64: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"memory must be a 2-D matrix with N,d >= 1, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("memory contains non-finite entries")
        object.__setattr__(self, "values", v)
        # float64 twin for score accumulation; built once, shared by readers.
        object.__setattr__(self, "_f64", v.astype(np.float64))

    @property
    def n_facts(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def values64(self) -> np.ndarray:
        return self._f64


@dataclass
class CandidateSet:
    """Ordered memory row ids from a retrieval, optionally with their scores."""

    indices: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != self.indices.shape:
                raise ValidationError("scores and indices length mismatch")

    def __len__(self) -> int:
        return self.indices.shape[0]


def save_memory(m: MemoryMatrix, path) -> None:
    """Write `m` in HMNM format."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m.n_facts, m.dim))
        fh.write(m.values.astype("<f4", copy=False).tobytes())


def load_memory(path) -> MemoryMatrix:
    """Read an HMNM file, validating magic, version, length and finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()
    n, d, offset = _read_hmnm_header(data, 0)
    values = _read_f32_block(data, offset, n, d)
    if offset + 4 * n * d != len(data):
        raise FormatError("trailing bytes after HMNM payload")
    if not np.isfinite(values).all():
        raise ValidationError("memory payload contains non-finite entries")
    return MemoryMatrix(values)


def _read_hmnm_header(data: bytes, offset: int) -> tuple[int, int, int]:
    if len(data) - offset < _HEADER.size:
        raise FormatError("file too short for HMNM header")
    magic, version, n, d = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNM version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"invalid dimensions N={n}, d={d}")
    return n, d, offset + _HEADER.size


def _read_f32_block(data: bytes, offset: int, n: int, d: int) -> np.ndarray:
    need = 4 * n * d
    if len(data) - offset < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data) - offset}")
    flat = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset)
    return flat.reshape(n, d).astype(np.float32)


def score_all(q: np.ndarray, m: MemoryMatrix) -> np.ndarray:
    """q . x_i for every row i, float64."""
    q = _check_query(q, m.dim)
    return kernels.scores(m.values, q)


def score_subset(q: np.ndarray, m: MemoryMatrix, idx) -> np.ndarray:
    """q . M[idx_j] in idx order; raises on out-of-range indices."""
    q = _check_query(q, m.dim)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return np.empty(0, dtype=np.float64)
    if idx.min() < 0 or idx.max() >= m.n_facts:
        raise IndexError("candidate index out of range")
    return kernels.subset_scores(m.values, q, idx)


def _check_query(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != dim:
        raise ValidationError(f"query dim {q.shape} does not match memory dim {dim}")
    if not np.isfinite(q).all():
        raise ValidationError("query contains non-finite entries")
    return q
