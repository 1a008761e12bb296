"""Numpy implementations of the scoring/selection kernels.

All kernels score float32 row data against float64 queries, accumulating in
float64. Selection ties are broken toward the lower row index everywhere.
"""
import numpy as np


def scores(mem: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Inner product of every row of `mem` (n, d) float32 with `q` (d,) float64."""
    return mem.astype(np.float64, copy=False) @ q


def subset_scores(mem: np.ndarray, q: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Inner products for the rows listed in `idx`, in idx order."""
    return mem[idx].astype(np.float64, copy=False) @ q


def topk_from_scores(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending, ties to the lower index.

    Partial selection: O(n + k log k), bit-identical to a full
    sort-by-(-score, index).
    """
    n = s.shape[0]
    if k == n:
        sel = np.arange(n)
    else:
        # kth largest value; then take everything above it and fill the
        # remaining slots with the lowest-index rows that tie at the boundary.
        bound = -np.partition(-s, k - 1)[k - 1]
        above = np.flatnonzero(s > bound)
        ties = np.flatnonzero(s == bound)[: k - above.size]
        sel = np.concatenate([above, ties])
    order = np.lexsort((sel, -s[sel]))
    return sel[order].astype(np.int64, copy=False)


def exact_topk(mem: np.ndarray, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Fused score-all + top-k selection. Returns (indices, scores)."""
    s = scores(mem, q)
    idx = topk_from_scores(s, k)
    return idx, s[idx]


def assign_rows(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """For each row of `x`, the index of the max-inner-product centroid.

    Ties resolve to the lower centroid index (np.argmax keeps the first max).
    """
    sims = x.astype(np.float64, copy=False) @ centroids.astype(np.float64, copy=False).T
    return np.argmax(sims, axis=1).astype(np.int64)
