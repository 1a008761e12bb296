"""Clustering-based approximate K-MIPS over augmented memory.

Spherical k-means (cosine assignment, unit-norm centroids, k-means++-style
seeding) organizes the rows; retrieval unions three candidate sources:
members of the top-scoring clusters, members of clusters sampled
softmax-proportionally to their centroid scores, and uniformly sampled
contiguous memory blocks.

Index file (HMNC, little-endian): magic b"HMNC", version u32 = 1, C u32,
aug_dim u32, seed u64, centroids C x aug_dim binary32, assignment N x u32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError
from .mcss import AugmentedMemory
from .memstore import CandidateSet

MAGIC = b"HMNC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


@dataclass
class ClusterIndex:
    """Unit-norm centroids plus the row -> cluster assignment."""

    centroids: np.ndarray  # C x aug_dim float32
    assignment: np.ndarray  # N int64
    seed: int
    objective_history: list[float] = field(default_factory=list, repr=False)
    _members: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def aug_dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_rows(self) -> int:
        return self.assignment.shape[0]

    def members(self, c: int) -> np.ndarray:
        """Row ids assigned to cluster c, ascending."""
        if self._members is None:
            order = np.argsort(self.assignment, kind="stable")
            bounds = np.searchsorted(self.assignment[order], np.arange(self.n_clusters + 1))
            self._members = [order[bounds[i]:bounds[i + 1]] for i in range(self.n_clusters)]
        return self._members[c]


@dataclass(frozen=True)
class RetrievalStrategy:
    """How many top clusters, sampled clusters and random blocks to union."""

    top_clusters: int = 0
    sampled_clusters: int = 0
    rand_blocks: int = 0
    block_count: int = 1
    rng_seed: int = 0

    def validate(self, n_clusters: int, n_rows: int) -> None:
        t, s, b = self.top_clusters, self.sampled_clusters, self.rand_blocks
        if t < 0 or s < 0 or b < 0:
            raise ValueError("strategy counts must be non-negative")
        if t + s < 1 and b < 1:
            raise ValueError("strategy must request at least one cluster or block")
        if t > n_clusters:
            raise ValueError(f"top_clusters {t} exceeds cluster count {n_clusters}")
        if s > n_clusters - t:
            raise ValueError(f"sampled_clusters {s} exceeds remaining clusters {n_clusters - t}")
        if b > 0:
            if self.block_count < 1 or self.block_count > n_rows:
                raise ValueError("block_count must be in [1, N]")
            if b > self.block_count:
                raise ValueError(f"rand_blocks {b} exceeds block_count {self.block_count}")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return x / norms


def _kmeanspp_init(xn: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ on unit-norm rows: next centre ~ squared chordal distance."""
    n = xn.shape[0]
    chosen = np.empty(n_clusters, dtype=np.int64)
    chosen[0] = rng.integers(n)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    min_d2 = np.maximum(2.0 - 2.0 * (xn @ xn[chosen[0]]), 0.0)
    for j in range(1, n_clusters):
        total = min_d2.sum()
        if total > 0.0:
            pick = int(rng.choice(n, p=min_d2 / total))
        else:
            # Remaining rows duplicate chosen centres; fall back to the
            # untaken rows so initial centroids stay distinct where possible.
            free = np.flatnonzero(~taken)
            pick = int(rng.choice(free)) if free.size else int(rng.integers(n))
        chosen[j] = pick
        taken[pick] = True
        min_d2 = np.minimum(min_d2, np.maximum(2.0 - 2.0 * (xn @ xn[pick]), 0.0))
    return xn[chosen].copy()


def build_cluster_index(
    am: AugmentedMemory, n_clusters: int, max_iters: int = 50, seed: int = 0
) -> ClusterIndex:
    """Spherical k-means over the augmented rows; deterministic given seed."""
    n = am.n_rows
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    xn64 = _normalize_rows(am.values.astype(np.float64))
    xn32 = np.ascontiguousarray(xn64, dtype=np.float32)
    centroids = _kmeanspp_init(xn64, n_clusters, rng)

    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        cent32 = np.ascontiguousarray(centroids, dtype=np.float32)
        new_assignment = kernels.assign_rows(xn32, cent32)
        new_assignment = _reseed_empty(xn64, centroids, new_assignment, n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new_assignment, xn64)
        norms = np.linalg.norm(sums, axis=1)
        update = norms > 0.0
        centroids[update] = sums[update] / norms[update, None]
        history.append(float(np.sum(np.einsum("ij,ij->i", xn64, centroids[new_assignment]))))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return ClusterIndex(
        centroids=np.ascontiguousarray(centroids, dtype=np.float32),
        assignment=assignment,
        seed=seed,
        objective_history=history,
    )


def _reseed_empty(
    xn64: np.ndarray, centroids: np.ndarray, assignment: np.ndarray, n_clusters: int
) -> np.ndarray:
    """Give each empty cluster the point least aligned with its current centroid."""
    counts = np.bincount(assignment, minlength=n_clusters)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return assignment
    assignment = assignment.copy()
    sims = np.einsum("ij,ij->i", xn64, centroids[assignment])
    for cid in empties:
        # Only steal from clusters that keep at least one member.
        movable = counts[assignment] >= 2
        candidates = np.flatnonzero(movable)
        if candidates.size == 0:
            break
        worst = candidates[np.argmin(sims[candidates])]
        counts[assignment[worst]] -= 1
        assignment[worst] = cid
        counts[cid] = 1
        centroids[cid] = xn64[worst]
        sims[worst] = 1.0
    return assignment


def sample_clusters(scores: np.ndarray, exclude, s: int, rng: np.random.Generator) -> np.ndarray:
    """Draw s distinct cluster ids, p ~ exp(score), renormalized after each draw."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape[0], dtype=bool)
    for e in exclude:
        mask[e] = False
    remaining = list(np.flatnonzero(mask))
    if s > len(remaining):
        raise ValueError(f"cannot sample {s} clusters from {len(remaining)} remaining")
    picks = np.empty(s, dtype=np.int64)
    for i in range(s):
        logits = scores[remaining]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        pos = int(rng.choice(len(remaining), p=p))
        picks[i] = remaining.pop(pos)
    return picks


def block_bounds(n_rows: int, block_count: int, block_id: int) -> tuple[int, int]:
    """Half-open row range of one contiguous block (equal sizes within 1)."""
    return (block_id * n_rows) // block_count, ((block_id + 1) * n_rows) // block_count


def retrieve_cluster(
    idx: ClusterIndex,
    q_aug: np.ndarray,
    strat: RetrievalStrategy,
    rng: np.random.Generator | None = None,
) -> CandidateSet:
    """Union of top-cluster, sampled-cluster and random-block members, deduplicated."""
    strat.validate(idx.n_clusters, idx.n_rows)
    q_aug = np.ascontiguousarray(q_aug, dtype=np.float64)
    if q_aug.shape != (idx.aug_dim,):
        raise ValueError(f"query dim {q_aug.shape} does not match index aug_dim {idx.aug_dim}")
    if rng is None:
        rng = np.random.default_rng(strat.rng_seed)

    cscores = kernels.scores(idx.centroids, q_aug)
    parts: list[np.ndarray] = []
    top_ids = np.empty(0, dtype=np.int64)
    if strat.top_clusters > 0:
        top_ids = kernels.topk_from_scores(cscores, strat.top_clusters)
        parts.extend(idx.members(int(c)) for c in top_ids)
    if strat.sampled_clusters > 0:
        for c in sample_clusters(cscores, top_ids, strat.sampled_clusters, rng):
            parts.append(idx.members(int(c)))
    if strat.rand_blocks > 0:
        blocks = np.sort(rng.choice(strat.block_count, size=strat.rand_blocks, replace=False))
        for b in blocks:
            lo, hi = block_bounds(idx.n_rows, strat.block_count, int(b))
            parts.append(np.arange(lo, hi, dtype=np.int64))
    merged = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    _, first = np.unique(merged, return_index=True)
    return CandidateSet(indices=merged[np.sort(first)])


def top_clusters_two_level(
    idx: ClusterIndex, super_idx: ClusterIndex, q_aug: np.ndarray, t: int, probe_supers: int
) -> np.ndarray:
    """Optional second level: shortlist centroids via clusters-of-centroids.

    Scores only the centroids belonging to the `probe_supers` best
    super-clusters; with probe_supers = super_idx.n_clusters this reproduces
    the flat top-t exactly.
    """
    sscores = kernels.scores(super_idx.centroids, np.ascontiguousarray(q_aug, dtype=np.float64))
    top_supers = kernels.topk_from_scores(sscores, probe_supers)
    shortlist = np.sort(np.concatenate([super_idx.members(int(s)) for s in top_supers]))
    cscores = kernels.subset_scores(idx.centroids, np.ascontiguousarray(q_aug, dtype=np.float64), shortlist)
    take = min(t, shortlist.size)
    return shortlist[kernels.topk_from_scores(cscores, take)]


def save_cluster_index(idx: ClusterIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, idx.n_clusters, idx.aug_dim, idx.seed))
        fh.write(idx.centroids.astype("<f4", copy=False).tobytes())
        fh.write(idx.assignment.astype("<u4").tobytes())


def load_cluster_index(path) -> ClusterIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("file too short for HMNC header")
    magic, version, n_clusters, aug_dim, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNC version {version}")
    offset = _HEADER.size
    cent_bytes = 4 * n_clusters * aug_dim
    if len(data) < offset + cent_bytes:
        raise FormatError("truncated HMNC centroid block")
    centroids = (
        np.frombuffer(data, dtype="<f4", count=n_clusters * aug_dim, offset=offset)
        .reshape(n_clusters, aug_dim)
        .astype(np.float32)
    )
    offset += cent_bytes
    rest = len(data) - offset
    if rest % 4 != 0:
        raise FormatError("HMNC assignment block has odd length")
    assignment = np.frombuffer(data, dtype="<u4", count=rest // 4, offset=offset).astype(np.int64)
    if assignment.size and assignment.max() >= n_clusters:
        raise FormatError("HMNC assignment references a missing cluster")
    return ClusterIndex(centroids=centroids, assignment=assignment, seed=seed)
