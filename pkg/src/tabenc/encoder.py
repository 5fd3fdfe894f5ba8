"""Cell embedding and the bi-dimensional attention encoder.

Cells are rendered to canonical text and embedded by a pluggable text
embedder (default: seeded character n-gram feature hashing). The encoder is a
stack of modules that alternate multi-head self-attention along rows and
columns, each sublayer pre-normalized with a residual connection, followed by
a position-wise feed-forward block. No positional information is added
anywhere, which is what makes the output equivariant under row and column
permutations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tables import Table, render_cell


class CellEmbedder(Protocol):
    """Deterministic text-to-vector map with a fixed output dimension."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def identity(self) -> dict: ...


class FeatureHashEmbedder:
    """Character n-gram (sizes 1-3) feature hashing into ``dim`` signed
    buckets, L2-normalized. Hashing is keyed blake2b, so equal (text, seed)
    always gives the same vector on every platform."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=False)
        self._cache: dict[str, np.ndarray] = {}

    def identity(self) -> dict:
        return {"kind": "feature-hash", "dim": self.dim, "seed": self.seed}

    def embed(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        vec = np.zeros(self.dim)
        for size in (1, 2, 3):
            for start in range(len(text) - size + 1):
                gram = text[start:start + size].encode("utf-8")
                h = int.from_bytes(
                    hashlib.blake2b(gram, digest_size=8, key=self._key).digest(),
                    "little")
                bucket = h % self.dim
                vec[bucket] += 1.0 if (h >> 63) & 1 == 0 else -1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        self._cache[text] = vec
        return vec


def make_embedder(identity: dict) -> FeatureHashEmbedder:
    if identity.get("kind") != "feature-hash":
        raise ValueError(f"unknown embedder kind {identity.get('kind')!r}")
    return FeatureHashEmbedder(dim=identity["dim"], seed=identity["seed"])


def embed_cells(t: Table, phi: CellEmbedder) -> Tensor:
    """Embed every cell of the table: output shape (m, n, dim). Missing cells
    are rendered as the empty string before embedding."""
    data = np.empty((t.m, t.n, phi.dim))
    for i, row in enumerate(t.rows):
        for j, value in enumerate(row):
            data[i, j] = phi.embed(render_cell(value))
    return Tensor(data)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64  # cell embedding width d
    layers: int = 2  # number of bi-dimensional modules
    heads: int = 4
    ffn_mult: int = 4
    row_first: bool = True  # attend along rows before columns in each module

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("need at least one module")

    def to_json(self) -> dict:
        return {"dim": self.dim, "layers": self.layers, "heads": self.heads,
                "ffn_mult": self.ffn_mult, "row_first": self.row_first}

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        return EncoderConfig(dim=obj["dim"], layers=obj["layers"],
                             heads=obj["heads"], ffn_mult=obj["ffn_mult"],
                             row_first=obj["row_first"])


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=(fan_in, fan_out))


def _attention_params(rng: np.random.Generator, dim: int) -> dict[str, Tensor]:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = Tensor(_linear_init(rng, dim, dim), requires_grad=True)
        p["b" + name[1]] = Tensor(np.zeros(dim), requires_grad=True)
    return p


def _ffn_params(rng: np.random.Generator, dim: int, mult: int) -> dict[str, Tensor]:
    return {
        "w1": Tensor(_linear_init(rng, dim, mult * dim), requires_grad=True),
        "b1": Tensor(np.zeros(mult * dim), requires_grad=True),
        "w2": Tensor(_linear_init(rng, mult * dim, dim), requires_grad=True),
        "b2": Tensor(np.zeros(dim), requires_grad=True),
    }


def _norm_params(dim: int) -> dict[str, Tensor]:
    return {"gain": Tensor(np.ones(dim), requires_grad=True),
            "bias": Tensor(np.zeros(dim), requires_grad=True)}


@dataclass
class EncoderParams:
    """Per-module weights, addressable as a flat name->Tensor map for the
    optimizer and the checkpoint format."""

    config: EncoderConfig
    layers: list[dict[str, dict[str, Tensor]]] = field(default_factory=list)

    @staticmethod
    def init(config: EncoderConfig, seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(config.layers):
            layers.append({
                "row_attn": _attention_params(rng, config.dim),
                "row_norm": _norm_params(config.dim),
                "col_attn": _attention_params(rng, config.dim),
                "col_norm": _norm_params(config.dim),
                "ffn": _ffn_params(rng, config.dim, config.ffn_mult),
                "ffn_norm": _norm_params(config.dim),
            })
        return EncoderParams(config=config, layers=layers)

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for block, tensors in layer.items():
                for name, tensor in tensors.items():
                    out[f"{prefix}.layer{i}.{block}.{name}"] = tensor
        return out

    @staticmethod
    def from_named(config: EncoderConfig, params: dict[str, Tensor],
                   prefix: str = "encoder") -> "EncoderParams":
        layers: list[dict[str, dict[str, Tensor]]] = []
        for i in range(config.layers):
            layer: dict[str, dict[str, Tensor]] = {}
            for block in ("row_attn", "row_norm", "col_attn", "col_norm",
                          "ffn", "ffn_norm"):
                want = f"{prefix}.layer{i}.{block}."
                tensors = {k[len(want):]: v for k, v in params.items()
                           if k.startswith(want)}
                if not tensors:
                    raise ValueError(f"checkpoint is missing block {want}*")
                layer[block] = tensors
            layers.append(layer)
        return EncoderParams(config=config, layers=layers)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def multi_head_attention(x: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Bidirectional self-attention over the second-to-last axis of a
    (batch, seq, dim) tensor."""
    batch, seq, dim = x.shape
    head_dim = dim // heads
    q = _linear(x, p["wq"], p["bq"])
    k = _linear(x, p["wk"], p["bk"])
    v = _linear(x, p["wv"], p["bv"])

    def split(t: Tensor) -> Tensor:
        return ad.swapaxes(ad.reshape(t, (batch, seq, heads, head_dim)), 1, 2)

    qh, kh, vh = split(q), split(k), split(v)  # (batch, heads, seq, head_dim)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, vh)
    merged = ad.reshape(ad.swapaxes(mixed, 1, 2), (batch, seq, dim))
    return _linear(merged, p["wo"], p["bo"])


def _ffn(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return _linear(ad.gelu(_linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def _pre_norm(x: Tensor, norm: dict[str, Tensor],
              sublayer: Callable[[Tensor], Tensor]) -> Tensor:
    return x + sublayer(ad.layer_norm(x, norm["gain"], norm["bias"]))


def encode(cells: Tensor, params: EncoderParams) -> Tensor:
    """Run the bi-dimensional attention stack over (m, n, dim) cell
    embeddings; the output keeps the same shape. Row attention batches over
    rows and mixes the cells within each row; column attention transposes the
    grid and does the same within each column."""
    cfg = params.config
    if cells.ndim != 3 or cells.shape[2] != cfg.dim:
        raise ad.ShapeMismatch(
            f"expected (m, n, {cfg.dim}) cell embeddings, got {cells.shape}")
    h = cells
    for layer in params.layers:
        def row_pass(x: Tensor) -> Tensor:
            return _pre_norm(
                x, layer["row_norm"],
                lambda y: multi_head_attention(y, layer["row_attn"], cfg.heads))

        def col_pass(x: Tensor) -> Tensor:
            flipped = ad.swapaxes(x, 0, 1)
            mixed = _pre_norm(
                flipped, layer["col_norm"],
                lambda y: multi_head_attention(y, layer["col_attn"], cfg.heads))
            return ad.swapaxes(mixed, 0, 1)

        if cfg.row_first:
            h = col_pass(row_pass(h))
        else:
            h = row_pass(col_pass(h))
        h = _pre_norm(h, layer["ffn_norm"], lambda y: _ffn(y, layer["ffn"]))
    return h
