"""Contrastive column pretraining over table snapshot pairs.

Each training step row-samples two snapshots per table, encodes both, pools
every column to a single vector, and pushes same-column vectors from sibling
snapshots together while treating every other vector in the mini-batch pool
as a negative:

    loss = -(1/|P|) * sum over e in P of
           log( exp(e . e+ / tau) / sum over e' in P minus {e} of exp(e . e' / tau) )

The denominator runs over all pool entries except e itself, so it includes
the positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, optimizer_step, zero_grads
from .adapter import AdapterParams, adapt_table
from .encoder import CellEmbedder, EncoderParams, embed_cells, encode
from .tables import Table, sample_snapshot_pair


class PoolTooSmall(ValueError):
    pass


class MissingPositive(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    batch_tables: int = 8
    rows_per_snapshot: Optional[int] = None  # None: min(8, m) per table
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    normalize: bool = True
    disjoint: bool = False

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_tables < 1 or self.steps < 0:
            raise ValueError("bad batch size or step count")

    def snapshot_rows(self, m: int) -> int:
        r = self.rows_per_snapshot if self.rows_per_snapshot is not None else min(8, m)
        return min(r, m)

    def to_json(self) -> dict:
        return {"tau": self.tau, "batch_tables": self.batch_tables,
                "rows_per_snapshot": self.rows_per_snapshot, "steps": self.steps,
                "lr": self.lr, "seed": self.seed, "normalize": self.normalize,
                "disjoint": self.disjoint}

    @staticmethod
    def from_json(obj: dict) -> "ContrastiveConfig":
        return ContrastiveConfig(**obj)


@dataclass(frozen=True)
class PoolEntry:
    table: str
    snapshot: str  # "A" | "B"
    column: int


@dataclass
class EmbeddingPool:
    """Stacked column vectors plus, for each entry, the index of its positive
    (the same column from the sibling snapshot). The positive map is an
    involution without fixed points."""

    vectors: Tensor  # (|P|, dim)
    positives: np.ndarray  # (|P|,) int
    entries: list[PoolEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        p = len(self.positives)
        if self.vectors.shape[0] != p:
            raise MissingPositive("vector/positive length mismatch")
        for i, j in enumerate(self.positives):
            if j == i or not 0 <= j < p:
                raise MissingPositive(f"entry {i} has invalid positive {j}")
            if self.positives[j] != i:
                raise MissingPositive(f"positive map is not involutive at {i}")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def pool_columns(encoded: Tensor, normalize: bool = True) -> Tensor:
    """Mean-pool (m, n, dim) encoded cells over rows into (n, dim) column
    vectors, optionally projected to unit L2 norm."""
    cols = ad.tmean(encoded, axis=0)
    return ad.l2_normalize(cols, axis=-1) if normalize else cols


def build_pool(column_vectors: list[tuple[PoolEntry, Tensor]]) -> EmbeddingPool:
    """Assemble pool entries (each vector rank-1) and wire same-table,
    same-column entries from snapshots A and B as positives."""
    index: dict[tuple[str, str, int], int] = {}
    for i, (entry, _) in enumerate(column_vectors):
        index[(entry.table, entry.snapshot, entry.column)] = i
    positives = np.empty(len(column_vectors), dtype=np.int64)
    for i, (entry, _) in enumerate(column_vectors):
        sibling = "B" if entry.snapshot == "A" else "A"
        j = index.get((entry.table, sibling, entry.column))
        if j is None:
            raise MissingPositive(f"no sibling for {entry}")
        positives[i] = j
    vectors = ad.concat_rows([vec for _, vec in column_vectors])
    return EmbeddingPool(vectors=vectors, positives=positives,
                         entries=[e for e, _ in column_vectors])


def contrastive_loss(pool: EmbeddingPool, tau: float) -> Tensor:
    """Temperature-scaled contrastive loss over the pool (see module
    docstring). Differentiable with respect to every pool vector."""
    p = len(pool)
    if p < 2:
        raise PoolTooSmall("need at least two pool entries")
    sims = ad.matmul(pool.vectors, ad.swapaxes(pool.vectors, 0, 1)) * (1.0 / tau)
    off_diag = 1.0 - np.eye(p)
    # Per-row max, detached: the shift cancels in the ratio but keeps every
    # exponent in range.
    shift = sims.data.max(axis=1, keepdims=True)
    shifted = sims - Tensor(shift)
    weights = ad.exp(shifted) * Tensor(off_diag)
    denom = ad.tsum(weights, axis=1)
    one_hot = np.zeros((p, p))
    one_hot[np.arange(p), pool.positives] = 1.0
    numer = ad.tsum(weights * Tensor(one_hot), axis=1)
    return ad.tmean(ad.log(denom) - ad.log(numer))


@dataclass
class PretrainResult:
    encoder: EncoderParams
    losses: list[float]
    adapter: Optional[AdapterParams] = None


def _batch_pool(tables: list[Table], cfg: ContrastiveConfig, phi: CellEmbedder,
                enc: EncoderParams, rng: np.random.Generator,
                adapter: Optional[AdapterParams] = None) -> EmbeddingPool:
    """Embed snapshot pairs for every table in the batch and build the pool.
    With an adapter present, pool entries are adapter outputs mean-pooled over
    the query axis instead of raw encoder column means."""
    column_vectors: list[tuple[PoolEntry, Tensor]] = []
    for t in tables:
        pair = sample_snapshot_pair(t, cfg.snapshot_rows(t.m), rng,
                                    disjoint=cfg.disjoint)
        for tag, snap in (("A", pair.a), ("B", pair.b)):
            encoded = encode(embed_cells(snap.table, phi), enc)
            if adapter is not None:
                per_col = ad.tmean(adapt_table(encoded, adapter), axis=1)  # (n, d')
                cols = ad.l2_normalize(per_col, axis=-1) if cfg.normalize else per_col
            else:
                cols = pool_columns(encoded, normalize=cfg.normalize)
            for j in range(t.n):
                column_vectors.append(
                    (PoolEntry(t.name, tag, j), ad.index_axis0(cols, j)))
    return build_pool(column_vectors)


def pretrain(tables: list[Table], cfg: ContrastiveConfig, enc: EncoderParams,
             phi: CellEmbedder) -> PretrainResult:
    """Contrastive pretraining of the encoder. Returns the updated parameters
    and the per-step loss curve; zero steps leave everything untouched."""
    params = enc.named()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    for _ in range(cfg.steps):
        batch = _pick_batch(tables, cfg.batch_tables, rng)
        pool = _batch_pool(batch, cfg, phi, enc, rng)
        loss = contrastive_loss(pool, cfg.tau)
        zero_grads(params.values())
        grads = ad.backward(loss, params)
        optimizer_step(params, grads, state)
        losses.append(loss.item())
    return PretrainResult(encoder=enc, losses=losses)


def train_adapter_proxy(tables: list[Table], enc: EncoderParams,
                        adapter: AdapterParams, cfg: ContrastiveConfig,
                        phi: CellEmbedder) -> PretrainResult:
    """Stand-in adapter training: reuse the contrastive objective on adapter
    outputs (mean over the k queries) so column discrimination survives the
    compression. The encoder stays frozen. This is a proxy task, not an
    alignment procedure against a language model."""
    params = adapter.named()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    for _ in range(cfg.steps):
        batch = _pick_batch(tables, cfg.batch_tables, rng)
        pool = _batch_pool(batch, cfg, phi, enc, rng, adapter=adapter)
        loss = contrastive_loss(pool, cfg.tau)
        zero_grads(params.values())
        grads = ad.backward(loss, params)
        optimizer_step(params, grads, state)
        losses.append(loss.item())
    return PretrainResult(encoder=enc, losses=losses, adapter=adapter)


def _pick_batch(tables: list[Table], size: int,
                rng: np.random.Generator) -> list[Table]:
    if len(tables) <= size:
        return list(tables)
    picks = rng.choice(len(tables), size=size, replace=False)
    return [tables[int(i)] for i in sorted(picks)]


def retrieval_eval(tables: list[Table], enc: EncoderParams, phi: CellEmbedder,
                   cfg: ContrastiveConfig,
                   adapter: Optional[AdapterParams] = None) -> float:
    """Cross-snapshot column retrieval: draw a fresh snapshot pair per table,
    embed both sides, and match every snapshot-A column vector to its nearest
    snapshot-B vector by cosine similarity across the whole batch. Returns
    top-1 accuracy."""
    rng = np.random.default_rng(cfg.seed + 1)
    a_vecs: list[np.ndarray] = []
    b_vecs: list[np.ndarray] = []
    labels_a: list[tuple[str, int]] = []
    labels_b: list[tuple[str, int]] = []
    for t in tables:
        pair = sample_snapshot_pair(t, cfg.snapshot_rows(t.m), rng,
                                    disjoint=cfg.disjoint)
        for vecs, labels, snap in ((a_vecs, labels_a, pair.a),
                                   (b_vecs, labels_b, pair.b)):
            encoded = encode(embed_cells(snap.table, phi), enc)
            if adapter is not None:
                cols = ad.tmean(adapt_table(encoded, adapter), axis=1)
            else:
                cols = pool_columns(encoded, normalize=False)
            for j in range(t.n):
                vecs.append(cols.data[j])
                labels.append((t.name, j))
    if len(a_vecs) + len(b_vecs) < 2:
        raise PoolTooSmall("need at least two columns for retrieval")
    a = np.stack(a_vecs)
    b = np.stack(b_vecs)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    nearest = np.argmax(a @ b.T, axis=1)
    hits = sum(1 for i, j in enumerate(nearest) if labels_a[i] == labels_b[int(j)])
    return hits / len(labels_a)
