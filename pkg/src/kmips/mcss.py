"""MIPS -> MCSS reduction by scaling and vector augmentation.

Memory rows are scaled so the largest L2 norm equals u < 1, then each scaled
row x gets aug_terms extra components 1/2 - ||x||^2, 1/2 - ||x||^4, ...,
1/2 - ||x||^(2^m). Queries are only zero-padded, never scaled or
renormalized: the appended zeros annihilate the extra components, so
augmented inner products reproduce scaled raw inner products exactly, while
augmented row norms become nearly equal (residual spread <= u^(2^(m+1))).

Augmented-memory file (HMNA, little-endian): magic b"HMNA", version u32 = 1,
base_dim u32, aug_terms u32, scale_factor binary64, then the HMNM body of
the augmented matrix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .memstore import MemoryMatrix, _read_f32_block, _read_hmnm_header, MAGIC as HMNM_MAGIC, VERSION as HMNM_VERSION, _HEADER as _HMNM_HEADER

MAGIC = b"HMNA"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

DEFAULT_U = 0.83
DEFAULT_AUG_TERMS = 3


@dataclass(frozen=True)
class McssConfig:
    """Scale ceiling u in (0, 1) and number of augmentation components (>= 1)."""

    u: float = DEFAULT_U
    aug_terms: int = DEFAULT_AUG_TERMS

    def __post_init__(self):
        if not 0.0 < self.u < 1.0:
            raise ValueError(f"u must be in (0, 1), got {self.u}")
        if self.aug_terms < 1:
            raise ValueError(f"aug_terms must be >= 1, got {self.aug_terms}")


@dataclass(frozen=True)
class AugmentedMemory:
    """Scaled-and-augmented twin of a memory matrix, used by all indexes."""

    scale_factor: float
    base_dim: int
    aug_terms: int
    values: np.ndarray  # N x (base_dim + aug_terms) float32

    @property
    def aug_dim(self) -> int:
        return self.base_dim + self.aug_terms

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def fit_scale(m: MemoryMatrix, cfg: McssConfig) -> float:
    """Factor that brings the largest row norm to u: u / max_i ||x_i||."""
    max_norm = float(np.linalg.norm(m.values64(), axis=1).max())
    if max_norm == 0.0:
        raise ValueError("all-zero memory cannot be scaled to norm u")
    return cfg.u / max_norm


def augment_rows(x_scaled: np.ndarray, aug_terms: int) -> np.ndarray:
    """Append 1/2 - ||x||^(2^i) for i = 1..aug_terms to each pre-scaled row (float64)."""
    x_scaled = np.atleast_2d(np.asarray(x_scaled, dtype=np.float64))
    sq = np.sum(x_scaled * x_scaled, axis=1)
    cols = []
    power = sq
    for _ in range(aug_terms):
        cols.append(0.5 - power)
        power = power * power
    return np.hstack([x_scaled, np.stack(cols, axis=1)])


def augment_memory(m: MemoryMatrix, cfg: McssConfig) -> AugmentedMemory:
    """Scale rows by fit_scale, then map each row through the augmentation."""
    scale = fit_scale(m, cfg)
    rows = augment_rows(m.values64() * scale, cfg.aug_terms)
    return AugmentedMemory(
        scale_factor=scale,
        base_dim=m.dim,
        aug_terms=cfg.aug_terms,
        values=np.ascontiguousarray(rows, dtype=np.float32),
    )


def augment_query(q: np.ndarray, aug_terms: int) -> np.ndarray:
    """Zero-pad the query; it is deliberately not scaled or renormalized."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a vector")
    return np.concatenate([q, np.zeros(aug_terms, dtype=np.float64)])


def save_augmented(am: AugmentedMemory, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, am.base_dim, am.aug_terms))
        fh.write(struct.pack("<d", am.scale_factor))
        fh.write(_HMNM_HEADER.pack(HMNM_MAGIC, HMNM_VERSION, am.n_rows, am.aug_dim))
        fh.write(am.values.astype("<f4", copy=False).tobytes())


def load_augmented(path) -> AugmentedMemory:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size + 8:
        raise FormatError("file too short for HMNA header")
    magic, version, base_dim, aug_terms = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNA version {version}")
    (scale,) = struct.unpack_from("<d", data, _HEADER.size)
    n, aug_dim, offset = _read_hmnm_header(data, _HEADER.size + 8)
    if aug_dim != base_dim + aug_terms:
        raise FormatError("HMNA body dimension does not match base_dim + aug_terms")
    values = _read_f32_block(data, offset, n, aug_dim)
    if offset + 4 * n * aug_dim != len(data):
        raise FormatError("trailing bytes after HMNA payload")
    return AugmentedMemory(scale_factor=scale, base_dim=base_dim, aug_terms=aug_terms, values=values)
