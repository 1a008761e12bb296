"""Brute-force exact K-MIPS over the full memory.

Serves as the exact attention retriever and as the correctness oracle for
every approximate index. Partial selection over all N scores; output is
bit-identical to a full sort by (-score, index).
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .memstore import CandidateSet, MemoryMatrix, _check_query


def k_mips_exact(q: np.ndarray, m: MemoryMatrix, k: int) -> CandidateSet:
    """The k rows maximizing q . x_i, score-sorted descending, ties to lower index."""
    if not 1 <= k <= m.n_facts:
        raise ValueError(f"k must be in [1, {m.n_facts}], got {k}")
    q = _check_query(q, m.dim)
    idx, scores = kernels.exact_topk(m.values, q, k)
    return CandidateSet(indices=idx, scores=scores)
