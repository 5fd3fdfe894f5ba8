"""Central finite-difference verification of every differentiable operation
and of the composed encoder/adapter/contrastive graphs.

Each check builds a scalar loss from randomized inputs, backpropagates, then
compares every (or a sampled subset of) coordinate gradient against
(f(x+eps) - f(x-eps)) / (2*eps). Relative error is measured against
max(|analytic|, |numeric|, 1).
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adapter import AdapterConfig, AdapterParams, adapt_table
from .encoder import EncoderConfig, EncoderParams, encode
from .pretrain import PoolEntry, build_pool, contrastive_loss

EPS = 1e-5
DEFAULT_TOL = 1e-4


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1.0)


def fd_check(make_loss: Callable[[], Tensor], params: dict[str, Tensor],
             rng: np.random.Generator, max_coords: int = 0) -> float:
    """Max relative error between backprop and central differences over all
    parameter coordinates (or a seeded sample of ``max_coords`` per tensor)."""
    loss = make_loss()
    ad.zero_grads(params.values())
    grads = ad.backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if max_coords and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = range(size)
        analytic = grads[name].reshape(-1)
        for idx in coords:
            idx = int(idx)
            keep = flat[idx]
            flat[idx] = keep + EPS
            up = make_loss().item()
            flat[idx] = keep - EPS
            down = make_loss().item()
            flat[idx] = keep
            numeric = (up - down) / (2 * EPS)
            worst = max(worst, _rel_err(float(analytic[idx]), numeric))
    return worst


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)


def _head(rng: np.random.Generator, out: Tensor) -> Tensor:
    return ad.tsum(out * Tensor(rng.normal(0.0, 1.0, size=out.shape)))


def run_gradient_suite(seed: int = 0) -> Iterator[tuple[str, float, float]]:
    """Yield (name, max relative error, tolerance) for every check."""
    rng = np.random.default_rng(seed)

    def op_case(name: str, build: Callable[[dict[str, Tensor]], Tensor],
                tol: float = DEFAULT_TOL, **leaves: Tensor):
        weights = None

        def make_loss() -> Tensor:
            nonlocal weights
            out = build(leaves)
            if weights is None:
                weights = Tensor(rng.normal(0.0, 1.0, size=out.shape))
            return ad.tsum(out * weights)

        return name, fd_check(make_loss, leaves, rng), tol

    yield op_case("add-broadcast", lambda v: v["a"] + v["b"],
                  a=_leaf(rng, 4, 5), b=_leaf(rng, 5))
    yield op_case("mul-broadcast", lambda v: v["a"] * v["b"],
                  a=_leaf(rng, 3, 4, 5), b=_leaf(rng, 4, 5))
    yield op_case("div", lambda v: ad.div(v["a"], v["b"] * v["b"] + Tensor(1.0)),
                  a=_leaf(rng, 4, 5), b=_leaf(rng, 4, 5))
    yield op_case("matmul", lambda v: ad.matmul(v["a"], v["b"]), tol=1e-6,
                  a=_leaf(rng, 4, 5), b=_leaf(rng, 5, 3))
    yield op_case("matmul-batched", lambda v: ad.matmul(v["a"], v["b"]),
                  a=_leaf(rng, 2, 3, 4, 5), b=_leaf(rng, 2, 3, 5, 2))
    yield op_case("softmax-last", lambda v: ad.softmax(v["x"], axis=-1),
                  x=_leaf(rng, 4, 5))
    yield op_case("softmax-axis0", lambda v: ad.softmax(v["x"], axis=0),
                  x=_leaf(rng, 4, 5, 8))
    yield op_case("layer-norm",
                  lambda v: ad.layer_norm(v["x"], v["gain"], v["bias"]),
                  tol=1e-5,
                  x=_leaf(rng, 4, 8), gain=_leaf(rng, 8), bias=_leaf(rng, 8))
    yield op_case("exp", lambda v: ad.exp(v["x"]), x=_leaf(rng, 4, 5))
    yield op_case("log", lambda v: ad.log(v["x"] * v["x"] + Tensor(0.5)),
                  x=_leaf(rng, 4, 5))
    yield op_case("sqrt", lambda v: ad.sqrt(v["x"] * v["x"] + Tensor(0.5)),
                  x=_leaf(rng, 4, 5))
    yield op_case("tanh", lambda v: ad.tanh(v["x"]), x=_leaf(rng, 4, 5))
    yield op_case("gelu", lambda v: ad.gelu(v["x"]), x=_leaf(rng, 4, 5))
    yield op_case("sum-axis", lambda v: ad.tsum(v["x"], axis=1), x=_leaf(rng, 4, 5, 8))
    yield op_case("mean-keepdims",
                  lambda v: ad.tmean(v["x"], axis=-1, keepdims=True),
                  x=_leaf(rng, 4, 5))
    yield op_case("reshape-swap",
                  lambda v: ad.swapaxes(ad.reshape(v["x"], (5, 4)), 0, 1),
                  x=_leaf(rng, 4, 5))
    yield op_case("index-axis0", lambda v: ad.index_axis0(v["x"], 2),
                  x=_leaf(rng, 4, 5))
    yield op_case("l2-normalize", lambda v: ad.l2_normalize(v["x"] + Tensor(3.0)),
                  x=_leaf(rng, 4, 5))
    yield op_case("softmax-matmul-chain",
                  lambda v: ad.matmul(ad.softmax(ad.matmul(v["a"], v["b"]), axis=-1),
                                      v["c"]),
                  a=_leaf(rng, 3, 4), b=_leaf(rng, 4, 5), c=_leaf(rng, 5, 2))

    yield _encoder_case(rng)
    yield _adapter_case(rng)
    yield _contrastive_case(rng)
    yield _pipeline_case(rng)


def _encoder_case(rng: np.random.Generator) -> tuple[str, float, float]:
    cfg = EncoderConfig(dim=8, layers=1, heads=2, ffn_mult=2)
    enc = EncoderParams.init(cfg, seed=11)
    cells = _leaf(rng, 4, 5, 8)
    params = {"cells": cells, **enc.named()}
    weights = Tensor(rng.normal(0.0, 1.0, size=(4, 5, 8)))

    def make_loss() -> Tensor:
        return ad.tsum(encode(cells, enc) * weights)

    return "encoder-graph", fd_check(make_loss, params, rng, max_coords=6), DEFAULT_TOL


def _adapter_case(rng: np.random.Generator) -> tuple[str, float, float]:
    cfg = AdapterConfig(queries=2, out_dim=16, heads=2, ffn_mult=2)
    adapter = AdapterParams.init(cfg, in_dim=8, seed=13)
    cells = _leaf(rng, 3, 2, 8)
    params = {"cells": cells, **adapter.named()}
    weights = Tensor(rng.normal(0.0, 1.0, size=(2, 2, 16)))

    def make_loss() -> Tensor:
        return ad.tsum(adapt_table(cells, adapter) * weights)

    return "adapter-graph", fd_check(make_loss, params, rng, max_coords=6), DEFAULT_TOL


def _contrastive_case(rng: np.random.Generator) -> tuple[str, float, float]:
    vectors = _leaf(rng, 6, 8)
    entries = [(PoolEntry("t", "A", j), None) for j in range(3)] \
        + [(PoolEntry("t", "B", j), None) for j in range(3)]

    def make_loss() -> Tensor:
        normed = ad.l2_normalize(vectors)
        pairs = [(entry, ad.index_axis0(normed, i))
                 for i, (entry, _) in enumerate(entries)]
        return contrastive_loss(build_pool(pairs), tau=0.5)

    err = fd_check(make_loss, {"vectors": vectors}, rng)
    return "contrastive-graph", err, DEFAULT_TOL


def _pipeline_case(rng: np.random.Generator) -> tuple[str, float, float]:
    """Encoder -> column pooling -> contrastive loss, differentiated through
    the whole stack with two snapshots sharing parameters."""
    from .pretrain import pool_columns

    cfg = EncoderConfig(dim=8, layers=1, heads=2, ffn_mult=2)
    enc = EncoderParams.init(cfg, seed=17)
    snap_a = _leaf(rng, 4, 3, 8)
    snap_b = _leaf(rng, 4, 3, 8)
    params = {"a": snap_a, "b": snap_b, **enc.named()}

    def make_loss() -> Tensor:
        pairs = []
        for tag, cells in (("A", snap_a), ("B", snap_b)):
            cols = pool_columns(encode(cells, enc))
            for j in range(3):
                pairs.append((PoolEntry("t", tag, j), ad.index_axis0(cols, j)))
        return contrastive_loss(build_pool(pairs), tau=0.1)

    return "pipeline-graph", fd_check(make_loss, params, rng, max_coords=4), DEFAULT_TOL
