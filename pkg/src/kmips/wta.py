"""Winner-takes-all hashing over augmented memory.

Each of n_hashes tables hashes a vector to a tuple of digits, one per random
permutation: the digit is the argmax position within the first prefix_len
elements of the permuted vector (ties to the lowest position). Codes depend
only on the rank order of the components, so any strictly monotone transform
of a vector leaves its code unchanged. Digits are packed into a single u64
key.

Retrieval unions the exact-code bucket of every table; if that falls short
of the requested budget it multi-probes codes at digit-distance 1 (one digit
swapped for the query prefix's runner-up), table by table, then truncates to
the budget in first-found order.

Index file (HMNW, little-endian): magic b"HMNW", version u32 = 1, n_hashes
u32, perms_per_hash u32, prefix_len u32, aug_dim u32, seed u64, then the
permutations as u32 arrays (hash-major, permutation-minor), then per table:
n_buckets u32 followed by (code u64, count u32, row ids u32 x count) sorted
by code.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .mcss import AugmentedMemory
from .memstore import CandidateSet

MAGIC = b"HMNW"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


def _bits_per_digit(prefix_len: int) -> int:
    return max(1, int(np.ceil(np.log2(prefix_len))))


@dataclass
class WtaIndex:
    """Permutation set plus one code -> row-ids table per hash function."""

    permutations: np.ndarray  # n_hashes x perms_per_hash x aug_dim, int64
    prefix_len: int
    tables: list[dict[int, np.ndarray]]
    seed: int

    @property
    def n_hashes(self) -> int:
        return self.permutations.shape[0]

    @property
    def perms_per_hash(self) -> int:
        return self.permutations.shape[1]

    @property
    def aug_dim(self) -> int:
        return self.permutations.shape[2]


def _validate_params(aug_dim: int, n_hashes: int, perms_per_hash: int, prefix_len: int) -> None:
    if n_hashes < 1 or perms_per_hash < 1:
        raise ValueError("n_hashes and perms_per_hash must be >= 1")
    if not 2 <= prefix_len <= aug_dim:
        raise ValueError(f"prefix_len must be in [2, {aug_dim}], got {prefix_len}")
    bits = _bits_per_digit(prefix_len)
    if perms_per_hash * bits > 64:
        raise ValueError(
            f"{perms_per_hash} digits of {bits} bits do not fit a 64-bit code"
        )


def wta_digits(x: np.ndarray, perms: np.ndarray, prefix_len: int) -> np.ndarray:
    """One digit per permutation: argmax position of the permuted prefix."""
    x = np.asarray(x, dtype=np.float64)
    if prefix_len > x.shape[-1]:
        raise ValueError(f"prefix_len {prefix_len} exceeds vector dim {x.shape[-1]}")
    prefix = x[..., perms[:, :prefix_len]] if x.ndim == 1 else x[:, perms[:, :prefix_len]]
    return np.argmax(prefix, axis=-1).astype(np.int64)


def wta_code(x: np.ndarray, perms: np.ndarray, prefix_len: int) -> tuple[int, ...]:
    """Digit tuple for one vector under one table's permutations."""
    return tuple(int(d) for d in wta_digits(x, np.asarray(perms), prefix_len))


def pack_digits(digits: np.ndarray, prefix_len: int) -> np.ndarray:
    """Pack digit rows (…, p) into u64 keys, first digit in the high bits."""
    bits = _bits_per_digit(prefix_len)
    digits = np.asarray(digits, dtype=np.uint64)
    code = np.zeros(digits.shape[:-1], dtype=np.uint64)
    for j in range(digits.shape[-1]):
        code = (code << np.uint64(bits)) | digits[..., j]
    return code


def build_wta_index(
    am: AugmentedMemory, n_hashes: int, perms_per_hash: int, prefix_len: int, seed: int = 0
) -> WtaIndex:
    """Insert every row into every table under its packed code."""
    _validate_params(am.aug_dim, n_hashes, perms_per_hash, prefix_len)
    rng = np.random.default_rng(seed)
    perms = np.stack(
        [
            np.stack([rng.permutation(am.aug_dim) for _ in range(perms_per_hash)])
            for _ in range(n_hashes)
        ]
    ).astype(np.int64)
    rows = am.values.astype(np.float64)
    tables: list[dict[int, np.ndarray]] = []
    for h in range(n_hashes):
        codes = pack_digits(wta_digits(rows, perms[h], prefix_len), prefix_len)
        order = np.argsort(codes, kind="stable")
        sorted_codes = codes[order]
        uniq, starts = np.unique(sorted_codes, return_index=True)
        bounds = np.append(starts, codes.size)
        tables.append(
            {int(uniq[i]): order[bounds[i]:bounds[i + 1]].astype(np.int64) for i in range(uniq.size)}
        )
    return WtaIndex(permutations=perms, prefix_len=prefix_len, tables=tables, seed=seed)


def _query_digits_with_runnerup(q: np.ndarray, perms: np.ndarray, prefix_len: int):
    """Best and second-best argmax positions per permutation prefix."""
    prefix = q[perms[:, :prefix_len]]
    best = np.argmax(prefix, axis=1)
    masked = prefix.copy()
    masked[np.arange(perms.shape[0]), best] = -np.inf
    runner = np.argmax(masked, axis=1)
    return best.astype(np.int64), runner.astype(np.int64)


def retrieve_wta(idx: WtaIndex, q_aug: np.ndarray, budget: int) -> CandidateSet:
    """Exact-code buckets, then digit-distance-1 probes until the budget fills."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    q = np.ascontiguousarray(q_aug, dtype=np.float64)
    if q.shape != (idx.aug_dim,):
        raise ValueError(f"query dim {q.shape} does not match index aug_dim {idx.aug_dim}")

    best = np.empty((idx.n_hashes, idx.perms_per_hash), dtype=np.int64)
    runner = np.empty_like(best)
    for h in range(idx.n_hashes):
        best[h], runner[h] = _query_digits_with_runnerup(q, idx.permutations[h], idx.prefix_len)

    n_rows = max((int(v.max()) for t in idx.tables for v in t.values()), default=-1) + 1
    seen = np.zeros(n_rows, dtype=bool)
    found: list[np.ndarray] = []
    count = 0

    def probe(h: int, digits: np.ndarray) -> None:
        nonlocal count
        bucket = idx.tables[h].get(int(pack_digits(digits, idx.prefix_len)))
        if bucket is None:
            return
        fresh = bucket[~seen[bucket]]
        if fresh.size:
            seen[fresh] = True
            found.append(fresh)
            count += fresh.size

    for h in range(idx.n_hashes):
        probe(h, best[h])
    if count < budget:
        for h in range(idx.n_hashes):
            for j in range(idx.perms_per_hash):
                if count >= budget:
                    break
                digits = best[h].copy()
                digits[j] = runner[h, j]
                probe(h, digits)
            if count >= budget:
                break
    merged = np.concatenate(found) if found else np.empty(0, dtype=np.int64)
    return CandidateSet(indices=merged[:budget])


def save_wta_index(idx: WtaIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(MAGIC, VERSION, idx.n_hashes, idx.perms_per_hash, idx.prefix_len, idx.aug_dim, idx.seed)
        )
        fh.write(idx.permutations.astype("<u4").tobytes())
        for table in idx.tables:
            fh.write(struct.pack("<I", len(table)))
            for code in sorted(table):
                members = table[code]
                fh.write(struct.pack("<QI", code, members.size))
                fh.write(members.astype("<u4").tobytes())


def load_wta_index(path) -> WtaIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("file too short for HMNW header")
    magic, version, n_hashes, perms_per_hash, prefix_len, aug_dim, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNW version {version}")
    offset = _HEADER.size
    n_perm_vals = n_hashes * perms_per_hash * aug_dim
    if len(data) < offset + 4 * n_perm_vals:
        raise FormatError("truncated HMNW permutation block")
    perms = (
        np.frombuffer(data, dtype="<u4", count=n_perm_vals, offset=offset)
        .reshape(n_hashes, perms_per_hash, aug_dim)
        .astype(np.int64)
    )
    offset += 4 * n_perm_vals
    tables: list[dict[int, np.ndarray]] = []
    for _ in range(n_hashes):
        if len(data) < offset + 4:
            raise FormatError("truncated HMNW table header")
        (n_buckets,) = struct.unpack_from("<I", data, offset)
        offset += 4
        table: dict[int, np.ndarray] = {}
        for _ in range(n_buckets):
            if len(data) < offset + 12:
                raise FormatError("truncated HMNW bucket header")
            code, cnt = struct.unpack_from("<QI", data, offset)
            offset += 12
            if len(data) < offset + 4 * cnt:
                raise FormatError("truncated HMNW bucket payload")
            table[int(code)] = np.frombuffer(data, dtype="<u4", count=cnt, offset=offset).astype(np.int64)
            offset += 4 * cnt
        tables.append(table)
    if offset != len(data):
        raise FormatError("trailing bytes after HMNW tables")
    return WtaIndex(permutations=perms, prefix_len=prefix_len, tables=tables, seed=seed)
