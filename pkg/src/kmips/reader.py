"""Trainable memory reader: bag-of-words queries, K-softmax attention, Adam.

A question is embedded as the sum of its word embeddings; the reader scores
a candidate subset of the memory, softmaxes over it, and minimizes the
negative log likelihood of the gold fact. Candidates come from a pluggable
retriever (full memory, exact top-k, or one of the approximate indexes);
during training every question in a minibatch shares one candidate set (the
union of per-question retrievals plus every gold fact), and the softmax
support is canonicalized to ascending row order so that different retrieval
routes to the same support produce bit-identical arithmetic.

Only the question embeddings learn; the memory is fixed. All reader math is
float64; the model file stores float32.

Model file (HMNR, little-endian): magic b"HMNR", version u32 = 1, vocab_size
u32, embed_dim u32, timestep u64, then the embedding table and the two Adam
moment matrices, each vocab_size x embed_dim binary32, row-major.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .cluster import ClusterIndex, RetrievalStrategy, retrieve_cluster
from .errors import FormatError, ValidationError
from .memstore import CandidateSet, MemoryMatrix, score_subset
from .pcatree import PcaTreeIndex, retrieve_pca_tree
from .wta import WtaIndex, retrieve_wta

MAGIC = b"HMNR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")

READER_MODES = ("full", "exact", "cluster", "wta", "pca-tree")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ReaderModel:
    """Question-word embedding table plus Adam state."""

    embeddings: np.ndarray  # vocab_size x embed_dim float64
    moment1: np.ndarray
    moment2: np.ndarray
    timestep: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "ReaderModel":
        return ReaderModel(
            embeddings=self.embeddings.copy(),
            moment1=self.moment1.copy(),
            moment2=self.moment2.copy(),
            timestep=self.timestep,
            hyper=self.hyper,
        )


@dataclass(frozen=True)
class Question:
    """Token ids plus the memory row that answers the question."""

    tokens: tuple[int, ...]
    gold_fact: int

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValidationError("question must have at least one token")


def init_model(vocab_size: int, embed_dim: int, seed: int = 0, hyper: AdamHyper | None = None) -> ReaderModel:
    """Embeddings uniform in [-0.08, 0.08], zero Adam moments."""
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.08, 0.08, size=(vocab_size, embed_dim))
    return ReaderModel(
        embeddings=emb,
        moment1=np.zeros_like(emb),
        moment2=np.zeros_like(emb),
        timestep=0,
        hyper=hyper or AdamHyper(),
    )


def embed_question(model: ReaderModel, question: Question) -> np.ndarray:
    """Sum of the embedding rows of the question's tokens, with multiplicity."""
    tokens = np.asarray(question.tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= model.vocab_size:
        raise ValidationError("token id out of vocabulary range")
    return model.embeddings[tokens].sum(axis=0)


def embed_batch(model: ReaderModel, batch: list[Question]) -> np.ndarray:
    return np.stack([embed_question(model, q) for q in batch])


def _softmax_columns(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=0, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=0, keepdims=True)


def k_softmax(q: np.ndarray, m: MemoryMatrix, c: CandidateSet) -> np.ndarray:
    """Softmax over the candidate subset's inner-product scores."""
    if len(c) == 0:
        raise ValueError("candidate set is empty")
    s = score_subset(q, m, c.indices)
    return _softmax_columns(s[:, None])[:, 0]


def nll_loss(probs: np.ndarray, gold_position: int) -> float:
    """-log p[gold]; the gold must sit inside the candidate set."""
    if not 0 <= gold_position < probs.shape[0]:
        raise ValueError("gold position outside the candidate set")
    return float(-np.log(probs[gold_position]))


def assemble_candidates(
    batch: list[Question], retrieved: list[np.ndarray], inject_gold: bool
) -> np.ndarray:
    """One shared softmax support per minibatch.

    Union of the per-question retrievals, plus every question's gold fact
    when inject_gold, canonicalized to ascending row order (a canonical
    order makes every retrieval route to the same support arithmetically
    identical).
    """
    parts = list(retrieved)
    if inject_gold:
        parts.append(np.asarray([q.gold_fact for q in batch], dtype=np.int64))
    merged = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return np.unique(merged).astype(np.int64)


def _gold_positions(support: np.ndarray, batch: list[Question]) -> np.ndarray:
    golds = np.asarray([q.gold_fact for q in batch], dtype=np.int64)
    pos = np.searchsorted(support, golds)
    ok = (pos < support.size) & (support[np.minimum(pos, support.size - 1)] == golds)
    if not ok.all():
        raise ValidationError("gold fact missing from the shared candidate set")
    return pos


def batch_forward(
    model: ReaderModel,
    batch: list[Question],
    support: np.ndarray,
    memory: MemoryMatrix,
    scores: np.ndarray | None = None,
):
    """Mean NLL over the batch plus the per-question candidate distributions."""
    h = embed_batch(model, batch)
    if scores is None:
        scores = memory.values64()[support] @ h.T
    probs = _softmax_columns(scores)
    gold_pos = _gold_positions(support, batch)
    loss = float(-np.log(probs[gold_pos, np.arange(len(batch))]).mean())
    return loss, probs, gold_pos, h


def _embedding_grad(
    batch: list[Question], grad_h: np.ndarray, vocab_size: int
) -> np.ndarray:
    grad = np.zeros((vocab_size, grad_h.shape[1]))
    token_ids = np.concatenate([np.asarray(q.tokens, dtype=np.int64) for q in batch])
    rows = np.repeat(np.arange(len(batch)), [len(q.tokens) for q in batch])
    np.add.at(grad, token_ids, grad_h[rows])
    return grad


def backward(
    model: ReaderModel,
    batch: list[Question],
    support: np.ndarray,
    memory: MemoryMatrix,
) -> np.ndarray:
    """Analytic gradient of the mean batch NLL w.r.t. the embedding table.

    The candidate support is treated as fixed; the memory receives no
    gradient.
    """
    _, probs, gold_pos, _ = batch_forward(model, batch, support, memory)
    delta = probs.copy()
    delta[gold_pos, np.arange(len(batch))] -= 1.0
    grad_h = delta.T @ memory.values64()[support] / len(batch)
    return _embedding_grad(batch, grad_h, model.vocab_size)


def adam_step(model: ReaderModel, grad: np.ndarray) -> None:
    """One bias-corrected Adam update, in place."""
    if grad.shape != model.embeddings.shape:
        raise ValueError("gradient shape does not match the embedding table")
    h = model.hyper
    model.timestep += 1
    model.moment1 = h.beta1 * model.moment1 + (1.0 - h.beta1) * grad
    model.moment2 = h.beta2 * model.moment2 + (1.0 - h.beta2) * (grad * grad)
    m_hat = model.moment1 / (1.0 - h.beta1**model.timestep)
    v_hat = model.moment2 / (1.0 - h.beta2**model.timestep)
    model.embeddings -= h.lr * m_hat / (np.sqrt(v_hat) + h.eps)


# --------------------------------------------------------------------------
# Retrievers


@dataclass
class BatchRetrieval:
    per_question: list[np.ndarray]
    full_scores: np.ndarray | None = None  # N x B when everything was scored


class FullRetriever:
    """Soft attention over the whole memory (the no-retrieval baseline)."""

    name = "full"

    def __init__(self, memory: MemoryMatrix):
        self.memory = memory
        self._all = np.arange(memory.n_facts, dtype=np.int64)

    def retrieve_batch(self, h: np.ndarray, rng=None) -> BatchRetrieval:
        scores = self.memory.values64() @ h.T
        return BatchRetrieval(per_question=[self._all] * h.shape[0], full_scores=scores)

    def inference_variant(self) -> "FullRetriever":
        return self


class ExactRetriever:
    """Exact top-k MIPS per question (linear scan)."""

    name = "exact"

    def __init__(self, memory: MemoryMatrix, k: int):
        if not 1 <= k <= memory.n_facts:
            raise ValueError(f"k must be in [1, {memory.n_facts}]")
        self.memory = memory
        self.k = k

    def retrieve_batch(self, h: np.ndarray, rng=None) -> BatchRetrieval:
        scores = self.memory.values64() @ h.T
        per_q = [kernels.topk_from_scores(np.ascontiguousarray(scores[:, b]), self.k) for b in range(h.shape[0])]
        return BatchRetrieval(per_question=per_q, full_scores=scores)

    def inference_variant(self) -> "ExactRetriever":
        return self


class ClusterRetriever:
    """Approximate retrieval through a cluster index (top/sampled/blocks)."""

    name = "cluster"

    def __init__(self, index: ClusterIndex, strategy: RetrievalStrategy):
        strategy.validate(index.n_clusters, index.n_rows)
        self.index = index
        self.strategy = strategy

    def _pad(self, h: np.ndarray) -> np.ndarray:
        extra = self.index.aug_dim - h.shape[1]
        if extra < 0:
            raise ValueError("query dim exceeds index aug_dim")
        return np.hstack([h, np.zeros((h.shape[0], extra))])

    def retrieve_batch(self, h: np.ndarray, rng=None) -> BatchRetrieval:
        if rng is None:
            rng = np.random.default_rng(self.strategy.rng_seed)
        padded = self._pad(h)
        per_q = [
            retrieve_cluster(self.index, padded[b], self.strategy, rng=rng).indices
            for b in range(h.shape[0])
        ]
        return BatchRetrieval(per_question=per_q)

    def inference_variant(self) -> "ClusterRetriever":
        """Inference defaults to top-clusters only, at the strategy's total cluster budget."""
        strat = self.strategy
        t = min(self.index.n_clusters, strat.top_clusters + strat.sampled_clusters)
        if t == 0:
            return self
        return ClusterRetriever(
            self.index, replace(strat, top_clusters=t, sampled_clusters=0, rand_blocks=0)
        )


class WtaRetriever:
    """Approximate retrieval through a WTA hash index."""

    name = "wta"

    def __init__(self, index: WtaIndex, budget: int):
        self.index = index
        self.budget = budget

    def retrieve_batch(self, h: np.ndarray, rng=None) -> BatchRetrieval:
        extra = self.index.aug_dim - h.shape[1]
        padded = np.hstack([h, np.zeros((h.shape[0], extra))])
        per_q = [retrieve_wta(self.index, padded[b], self.budget).indices for b in range(h.shape[0])]
        return BatchRetrieval(per_question=per_q)

    def inference_variant(self) -> "WtaRetriever":
        return self


class PcaTreeRetriever:
    """Approximate retrieval through a PCA tree (single-path descent)."""

    name = "pca-tree"

    def __init__(self, index: PcaTreeIndex):
        self.index = index

    def retrieve_batch(self, h: np.ndarray, rng=None) -> BatchRetrieval:
        extra = self.index.aug_dim - h.shape[1]
        padded = np.hstack([h, np.zeros((h.shape[0], extra))])
        per_q = [retrieve_pca_tree(self.index, padded[b]).indices for b in range(h.shape[0])]
        return BatchRetrieval(per_question=per_q)

    def inference_variant(self) -> "PcaTreeRetriever":
        return self


def make_retriever(
    mode: str,
    memory: MemoryMatrix,
    k: int = 10,
    index=None,
    strategy: RetrievalStrategy | None = None,
    budget: int | None = None,
):
    """Build the retriever for a reader mode name."""
    if mode == "full":
        return FullRetriever(memory)
    if mode == "exact":
        return ExactRetriever(memory, k)
    if mode == "cluster":
        if not isinstance(index, ClusterIndex):
            raise ValueError("cluster mode needs a ClusterIndex")
        return ClusterRetriever(index, strategy or RetrievalStrategy(top_clusters=1))
    if mode == "wta":
        if not isinstance(index, WtaIndex):
            raise ValueError("wta mode needs a WtaIndex")
        return WtaRetriever(index, budget if budget is not None else k)
    if mode == "pca-tree":
        if not isinstance(index, PcaTreeIndex):
            raise ValueError("pca-tree mode needs a PcaTreeIndex")
        return PcaTreeRetriever(index)
    raise ValueError(f"unknown reader mode {mode!r}; expected one of {READER_MODES}")


# --------------------------------------------------------------------------
# Training / evaluation


class EarlyStopTracker:
    """Stop after `patience` consecutive strict decreases in validation accuracy."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.prev: float | None = None
        self.streak = 0
        self.best: float = -np.inf
        self.best_epoch = 0

    def update(self, epoch: int, acc: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if acc > self.best:
            self.best = acc
            self.best_epoch = epoch
        if self.prev is not None and acc < self.prev:
            self.streak += 1
        else:
            self.streak = 0
        self.prev = acc
        return self.streak >= self.patience


@dataclass
class TrainResult:
    model: ReaderModel  # snapshot from the best-validation epoch
    log: list[dict]
    best_epoch: int


def train(
    model: ReaderModel,
    memory: MemoryMatrix,
    train_questions: list[Question],
    valid_questions: list[Question],
    retriever,
    epochs: int,
    batch_size: int = 128,
    seed: int = 0,
    log_fn=None,
) -> TrainResult:
    """NLL training with gold injection, per-epoch validation and early stopping."""
    if not train_questions or not valid_questions:
        raise ValueError("train and validation splits must be non-empty")
    ss = np.random.SeedSequence(seed)
    shuffle_ss, retrieval_ss = ss.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    retrieval_rng = np.random.default_rng(retrieval_ss)
    eval_retriever = retriever.inference_variant()
    stopper = EarlyStopTracker(patience=3)
    log: list[dict] = []
    best_model = model.copy()
    n = len(train_questions)

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        total_loss = 0.0
        support_sizes: list[int] = []
        for start in range(0, n, batch_size):
            batch = [train_questions[i] for i in perm[start:start + batch_size]]
            h = embed_batch(model, batch)
            ret = retriever.retrieve_batch(h, rng=retrieval_rng)
            support = assemble_candidates(batch, ret.per_question, inject_gold=True)
            scores = ret.full_scores[support, :] if ret.full_scores is not None else None
            loss, probs, gold_pos, _ = batch_forward(model, batch, support, memory, scores=scores)
            delta = probs
            delta[gold_pos, np.arange(len(batch))] -= 1.0
            grad_h = delta.T @ memory.values64()[support] / len(batch)
            adam_step(model, _embedding_grad(batch, grad_h, model.vocab_size))
            total_loss += loss * len(batch)
            support_sizes.append(int(support.size))
        valid_acc, _ = evaluate(model, memory, valid_questions, eval_retriever)
        entry = {
            "epoch": epoch,
            "train_loss": total_loss / n,
            "valid_acc": valid_acc,
            "avg_softmax_size": float(np.mean(support_sizes)),
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        stop = stopper.update(epoch, valid_acc)
        if epoch == stopper.best_epoch:
            best_model = model.copy()
        if stop:
            break
    return TrainResult(model=best_model, log=log, best_epoch=stopper.best_epoch)


def evaluate(
    model: ReaderModel,
    memory: MemoryMatrix,
    questions: list[Question],
    retriever,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Accuracy and mean per-question candidate count, without gold injection.

    A question whose retrieval misses its gold fact counts as wrong.
    """
    if not questions:
        raise ValueError("cannot evaluate on an empty question list")
    correct = 0
    total_candidates = 0
    for start in range(0, len(questions), batch_size):
        batch = questions[start:start + batch_size]
        h = embed_batch(model, batch)
        ret = retriever.retrieve_batch(h, rng=None)
        for b, q in enumerate(batch):
            cands = ret.per_question[b]
            total_candidates += cands.size
            if cands.size == 0:
                continue
            if ret.full_scores is not None:
                s = ret.full_scores[cands, b]
            else:
                s = kernels.subset_scores(memory.values, np.ascontiguousarray(h[b]), cands)
            pred = int(cands[np.lexsort((cands, -s))[0]])
            if pred == q.gold_fact:
                correct += 1
    return correct / len(questions), total_candidates / len(questions)


# --------------------------------------------------------------------------
# Serialization


def save_model(model: ReaderModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, model.vocab_size, model.embed_dim, model.timestep))
        for block in (model.embeddings, model.moment1, model.moment2):
            fh.write(block.astype("<f4").tobytes())


def load_model(path, hyper: AdamHyper | None = None) -> ReaderModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("file too short for HMNR header")
    magic, version, vocab_size, embed_dim, timestep = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HMNR version {version}")
    need = _HEADER.size + 3 * 4 * vocab_size * embed_dim
    if len(data) != need:
        raise FormatError(f"HMNR payload length mismatch: need {need} bytes, have {len(data)}")
    blocks = []
    offset = _HEADER.size
    for _ in range(3):
        blocks.append(
            np.frombuffer(data, dtype="<f4", count=vocab_size * embed_dim, offset=offset)
            .reshape(vocab_size, embed_dim)
            .astype(np.float64)
        )
        offset += 4 * vocab_size * embed_dim
    return ReaderModel(
        embeddings=blocks[0],
        moment1=blocks[1],
        moment2=blocks[2],
        timestep=timestep,
        hyper=hyper or AdamHyper(),
    )
