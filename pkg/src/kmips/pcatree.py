"""Balanced binary tree over augmented memory, split on per-node principal components.

Each internal node splits its points at the median projection onto the
node's top principal component (power iteration on the mean-centered
covariance, seeded start, sign fixed so the first nonzero entry is
positive); the median point goes left. Queries descend a single path and
the reached leaf is the candidate set, so leaf_size alone controls the
budget.

Index file (HMNT, little-endian): magic b"HMNT", version u32 = 1, leaf_size
u32, aug_dim u32, seed u64, node count u32, then a preorder node dump: tag
u8 (0 internal, 1 leaf); internal nodes carry direction binary32 x aug_dim,
threshold binary64 and two child ids u32; leaves carry count u32 plus row
ids u32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .mcss import AugmentedMemory
from .memstore import CandidateSet

MAGIC = b"HMNT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQI")

_POWER_ITERS = 50
_POWER_TOL = 1e-7


@dataclass
class _Node:
    direction: np.ndarray | None = None  # aug_dim float32, internal only
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    members: np.ndarray | None = None  # leaf only


@dataclass
class PcaTreeIndex:
    nodes: list[_Node]
    leaf_size: int
    aug_dim: int
    seed: int

    def leaves(self) -> list[np.ndarray]:
        """Member lists of every leaf (exhaustive-path enumeration)."""
        return [n.members for n in self.nodes if n.members is not None]


def _principal_direction(points: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """Top principal component by power iteration; None for zero covariance."""
    centered = points - points.mean(axis=0)
    v = rng.standard_normal(points.shape[1])
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v[0] = 1.0
        norm = 1.0
    v /= norm
    for _ in range(_POWER_ITERS):
        w = centered.T @ (centered @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return None
        w /= norm
        if np.linalg.norm(w - v) < _POWER_TOL:
            v = w
            break
        v = w
    nz = np.flatnonzero(v)
    if nz.size == 0:
        return None
    if v[nz[0]] < 0:
        v = -v
    return v


def build_pca_tree(am: AugmentedMemory, leaf_size: int, seed: int = 0) -> PcaTreeIndex:
    """Recursive median splits until every node holds at most leaf_size points."""
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    rows = am.values.astype(np.float64)
    nodes: list[_Node] = []

    def make_leaf(node_id: int, ids: np.ndarray) -> None:
        nodes[node_id].members = np.sort(ids).astype(np.int64)

    def split(ids: np.ndarray) -> int:
        node_id = len(nodes)
        nodes.append(_Node())
        if ids.size <= leaf_size:
            make_leaf(node_id, ids)
            return node_id
        rng = np.random.default_rng([seed, node_id])
        direction = _principal_direction(rows[ids], rng)
        if direction is None:
            make_leaf(node_id, ids)
            return node_id
        proj = rows[ids] @ direction
        order = np.lexsort((ids, proj))
        threshold = float(proj[order[(ids.size - 1) // 2]])
        left_mask = proj <= threshold
        left_ids = ids[left_mask]
        right_ids = ids[~left_mask]
        if left_ids.size == 0 or right_ids.size == 0:
            # Degenerate projections (duplicate points): stop splitting.
            make_leaf(node_id, ids)
            return node_id
        nodes[node_id].direction = np.ascontiguousarray(direction, dtype=np.float32)
        nodes[node_id].threshold = threshold
        nodes[node_id].left = split(left_ids)
        nodes[node_id].right = split(right_ids)
        return node_id

    split(np.arange(am.n_rows, dtype=np.int64))
    return PcaTreeIndex(nodes=nodes, leaf_size=leaf_size, aug_dim=am.aug_dim, seed=seed)


def retrieve_pca_tree(idx: PcaTreeIndex, q_aug: np.ndarray) -> CandidateSet:
    """Single-path descent: left when q . direction <= threshold."""
    q = np.ascontiguousarray(q_aug, dtype=np.float64)
    if q.shape != (idx.aug_dim,):
        raise ValueError(f"query dim {q.shape} does not match index aug_dim {idx.aug_dim}")
    node = idx.nodes[0]
    while node.members is None:
        proj = float(node.direction.astype(np.float64) @ q)
        node = idx.nodes[node.left if proj <= node.threshold else node.right]
    return CandidateSet(indices=node.members.copy())


def save_pca_tree(idx: PcaTreeIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, idx.leaf_size, idx.aug_dim, idx.seed, len(idx.nodes)))
        for node in idx.nodes:
            if node.members is None:
                fh.write(b"\x00")
                fh.write(node.direction.astype("<f4", copy=False).tobytes())
                fh.write(struct.pack("<dII", node.threshold, node.left, node.right))
            else:
                fh.write(b"\x01")
                fh.write(struct.pack("<I", node.members.size))
                fh.write(node.members.astype("<u4").tobytes())


def load_pca_tree(path) -> PcaTreeIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("file too short for HMNT header")
    magic, version, leaf_size, aug_dim, seed, n_nodes = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNT version {version}")
    offset = _HEADER.size
    nodes: list[_Node] = []
    for _ in range(n_nodes):
        if len(data) < offset + 1:
            raise FormatError("truncated HMNT node dump")
        tag = data[offset]
        offset += 1
        if tag == 0:
            need = 4 * aug_dim + 16
            if len(data) < offset + need:
                raise FormatError("truncated HMNT internal node")
            direction = np.frombuffer(data, dtype="<f4", count=aug_dim, offset=offset).astype(np.float32)
            offset += 4 * aug_dim
            threshold, left, right = struct.unpack_from("<dII", data, offset)
            offset += 16
            nodes.append(_Node(direction=direction, threshold=threshold, left=left, right=right))
        elif tag == 1:
            if len(data) < offset + 4:
                raise FormatError("truncated HMNT leaf header")
            (cnt,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if len(data) < offset + 4 * cnt:
                raise FormatError("truncated HMNT leaf payload")
            members = np.frombuffer(data, dtype="<u4", count=cnt, offset=offset).astype(np.int64)
            offset += 4 * cnt
            nodes.append(_Node(members=members))
        else:
            raise FormatError(f"unknown HMNT node tag {tag}")
    if offset != len(data):
        raise FormatError("trailing bytes after HMNT nodes")
    return PcaTreeIndex(nodes=nodes, leaf_size=leaf_size, aug_dim=aug_dim, seed=seed)
