"""Learnable-query cross-attention adapter.

A bank of k trained query vectors cross-attends over the encoded cells of one
column, compressing a variable number of rows into a fixed (k, out_dim) block.
Applying it to every column of a table gives the (n, k, out_dim) column
representation consumed downstream. Because the queries see the cells as an
unordered key/value set, the output is invariant to row order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _attention_params, _ffn_params, _linear, _norm_params


@dataclass(frozen=True)
class AdapterConfig:
    queries: int = 4  # k
    out_dim: int = 128  # d', matched to the consumer's embedding width
    heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.queries < 1:
            raise ValueError("need at least one query")
        if self.out_dim % self.heads != 0:
            raise ValueError("out_dim must be divisible by heads")

    def to_json(self) -> dict:
        return {"queries": self.queries, "out_dim": self.out_dim,
                "heads": self.heads, "ffn_mult": self.ffn_mult}

    @staticmethod
    def from_json(obj: dict) -> "AdapterConfig":
        return AdapterConfig(queries=obj["queries"], out_dim=obj["out_dim"],
                             heads=obj["heads"], ffn_mult=obj["ffn_mult"])


@dataclass
class AdapterParams:
    config: AdapterConfig
    in_dim: int
    query_bank: Tensor = None  # (k, out_dim)
    proj_k: Tensor = None  # (in_dim, out_dim)
    proj_v: Tensor = None
    attn: dict[str, Tensor] = field(default_factory=dict)
    query_norm: dict[str, Tensor] = field(default_factory=dict)
    ffn: dict[str, Tensor] = field(default_factory=dict)
    ffn_norm: dict[str, Tensor] = field(default_factory=dict)

    @staticmethod
    def init(config: AdapterConfig, in_dim: int, seed: int = 0) -> "AdapterParams":
        rng = np.random.default_rng(seed)
        d = config.out_dim
        return AdapterParams(
            config=config,
            in_dim=in_dim,
            query_bank=Tensor(rng.normal(0.0, 0.02, size=(config.queries, d)),
                              requires_grad=True),
            proj_k=Tensor(rng.normal(0.0, 0.02, size=(in_dim, d)), requires_grad=True),
            proj_v=Tensor(rng.normal(0.0, 0.02, size=(in_dim, d)), requires_grad=True),
            attn=_attention_params(rng, d),
            query_norm=_norm_params(d),
            ffn=_ffn_params(rng, d, config.ffn_mult),
            ffn_norm=_norm_params(d),
        )

    def named(self, prefix: str = "adapter") -> dict[str, Tensor]:
        out = {
            f"{prefix}.query_bank": self.query_bank,
            f"{prefix}.proj_k": self.proj_k,
            f"{prefix}.proj_v": self.proj_v,
        }
        for block_name, block in (("attn", self.attn), ("query_norm", self.query_norm),
                                  ("ffn", self.ffn), ("ffn_norm", self.ffn_norm)):
            for name, tensor in block.items():
                out[f"{prefix}.{block_name}.{name}"] = tensor
        return out

    @staticmethod
    def from_named(config: AdapterConfig, in_dim: int, params: dict[str, Tensor],
                   prefix: str = "adapter") -> "AdapterParams":
        def block(name: str) -> dict[str, Tensor]:
            want = f"{prefix}.{name}."
            found = {k[len(want):]: v for k, v in params.items() if k.startswith(want)}
            if not found:
                raise ValueError(f"checkpoint is missing block {want}*")
            return found

        return AdapterParams(
            config=config,
            in_dim=in_dim,
            query_bank=params[f"{prefix}.query_bank"],
            proj_k=params[f"{prefix}.proj_k"],
            proj_v=params[f"{prefix}.proj_v"],
            attn=block("attn"),
            query_norm=block("query_norm"),
            ffn=block("ffn"),
            ffn_norm=block("ffn_norm"),
        )


def _cross_attention(queries: Tensor, keys: Tensor, values: Tensor,
                     p: dict[str, Tensor], heads: int) -> Tensor:
    """Multi-head attention of (k, d) queries over an (m, d) key/value set."""
    kq, d = queries.shape
    m = keys.shape[0]
    head_dim = d // heads
    q = _linear(queries, p["wq"], p["bq"])
    k = _linear(keys, p["wk"], p["bk"])
    v = _linear(values, p["wv"], p["bv"])

    def split(t: Tensor, rows: int) -> Tensor:
        return ad.swapaxes(ad.reshape(t, (rows, heads, head_dim)), 0, 1)

    qh = split(q, kq)  # (heads, k, head_dim)
    kh = split(k, m)
    vh = split(v, m)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, vh)  # (heads, k, head_dim)
    merged = ad.reshape(ad.swapaxes(mixed, 0, 1), (kq, d))
    return _linear(merged, p["wo"], p["bo"])


def adapt_column(col_cells: Tensor, params: AdapterParams) -> Tensor:
    """Compress the (m, in_dim) encoded cells of one column into a fixed
    (k, out_dim) block, independent of m."""
    if col_cells.ndim != 2 or col_cells.shape[1] != params.in_dim:
        raise ad.ShapeMismatch(
            f"expected (m, {params.in_dim}) column cells, got {col_cells.shape}")
    cfg = params.config
    keys = ad.matmul(col_cells, params.proj_k)
    values = ad.matmul(col_cells, params.proj_v)
    normed_q = ad.layer_norm(params.query_bank, params.query_norm["gain"],
                             params.query_norm["bias"])
    attended = params.query_bank + _cross_attention(
        normed_q, keys, values, params.attn, cfg.heads)
    normed = ad.layer_norm(attended, params.ffn_norm["gain"], params.ffn_norm["bias"])
    hidden = _linear(ad.gelu(_linear(normed, params.ffn["w1"], params.ffn["b1"])),
                     params.ffn["w2"], params.ffn["b2"])
    return attended + hidden


def adapt_table(encoded: Tensor, params: AdapterParams) -> Tensor:
    """Apply the adapter to every column of (m, n, in_dim) encoded cells,
    producing (n, k, out_dim). Columns share parameters but do not interact."""
    if encoded.ndim != 3 or encoded.shape[2] != params.in_dim:
        raise ad.ShapeMismatch(
            f"expected (m, n, {params.in_dim}) encoded cells, got {encoded.shape}")
    per_column = ad.swapaxes(encoded, 0, 1)  # (n, m, in_dim)
    blocks = [adapt_column(ad.index_axis0(per_column, j), params)
              for j in range(per_column.shape[0])]
    return ad.concat_rows(blocks)
