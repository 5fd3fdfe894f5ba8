"""Command-line entry point.

Subcommands: clean, pretrain, encode, serialize, gen-align, filter, and
gradcheck. Every stochastic command takes an explicit --seed (or the
TABENC_SEED environment variable) and is bitwise reproducible. Exit codes:
0 success, 1 data error, 2 usage error. Output files are written via a
temporary file plus rename.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import AdapterConfig, AdapterParams, adapt_table
from .align import (AlignTask, GENERATED_TASKS, gen_cell_prediction,
                    gen_column_prediction, load_templates, export_jsonl)
from .curation import (DEFAULT_SLM_THRESHOLD, read_token_scores,
                       read_tuple_samples, regex_filter, slm_mask)
from .encoder import (EncoderConfig, EncoderParams, FeatureHashEmbedder,
                      embed_cells, encode, make_embedder)
from .gradsuite import run_gradient_suite
from .hybrid import CANONICAL_VARIANT, VARIANTS, serialize_variant
from .pretrain import ContrastiveConfig, pretrain, retrieval_eval
from .tables import (RuleSet, Table, clean, parse_csv, render_cell,
                     table_from_json, table_to_json)


class UsageError(Exception):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _seed_from(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TABENC_SEED")
    if env is not None:
        return int(env)
    raise UsageError("a seed is required: pass --seed or set TABENC_SEED")


def _load_table(path: Path) -> Table:
    if path.suffix == ".json":
        return table_from_json(path.read_text("utf-8"))
    return parse_csv(path.read_bytes(), name=path.stem)


def _table_files(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.iterdir()
                   if p.suffix in (".csv", ".json") and p.is_file())
    return files


def cmd_clean(args: argparse.Namespace) -> int:
    in_dir, out_dir = Path(args.input_dir), Path(args.output_dir)
    rules = RuleSet(disabled=frozenset(args.disable or ()))
    files = _table_files(in_dir)
    accepted = rejected = failed = 0
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in files:
        try:
            table = _load_table(path)
        except Exception as exc:
            if args.skip_bad:
                failed += 1
                print(f"skipping {path.name}: {exc}", file=sys.stderr)
                continue
            raise
        report = clean(table, rules)
        _atomic_write(out_dir / f"{path.stem}.report.json",
                      report.to_json().encode("utf-8"))
        if report.accepted:
            accepted += 1
            _atomic_write(out_dir / f"{path.stem}.json",
                          table_to_json(report.table).encode("utf-8"))
        else:
            rejected += 1
    print(f"{len(files)} tables: {accepted} accepted, {rejected} rejected, "
          f"{failed} unreadable")
    return 0


def _build_run_config(args: argparse.Namespace) -> dict:
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text("utf-8"))
    for key in ("steps", "tau", "lr", "batch_tables", "rows_per_snapshot"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            config.setdefault("contrastive", {})[key] = value
    return config


def cmd_pretrain(args: argparse.Namespace) -> int:
    seed = _seed_from(args)
    config = _build_run_config(args)
    enc_cfg = EncoderConfig.from_json(config["encoder"]) if "encoder" in config \
        else EncoderConfig()
    contrastive = dict(config.get("contrastive", {}))
    contrastive["seed"] = seed
    cfg = ContrastiveConfig(**contrastive)
    phi = FeatureHashEmbedder(dim=enc_cfg.dim, seed=seed)
    tables = [_load_table(p) for p in _table_files(Path(args.tables_dir))]
    if not tables:
        raise SystemExit("no tables found")
    enc = EncoderParams.init(enc_cfg, seed=seed)
    result = pretrain(tables, cfg, enc, phi)
    adapter_cfg = AdapterConfig.from_json(config["adapter"]) if "adapter" in config \
        else AdapterConfig()
    adapter = AdapterParams.init(adapter_cfg, in_dim=enc_cfg.dim, seed=seed)
    full_config = {"encoder": enc_cfg.to_json(), "adapter": adapter_cfg.to_json(),
                   "embedder": phi.identity(), "contrastive": cfg.to_json()}
    params = {**enc.named(), **adapter.named()}
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tmp = str(ckpt) + ".tmp"
    ad.save_checkpoint(tmp, full_config, params)
    os.replace(tmp, ckpt)
    curve = "".join(f"{i},{loss!r}\n" for i, loss in enumerate(result.losses))
    _atomic_write(Path(args.loss_csv), ("step,loss\n" + curve).encode("utf-8"))
    accuracy = retrieval_eval(tables, enc, phi, cfg)
    print(f"retrieval top-1 accuracy: {accuracy:.4f}")
    return 0


def _load_model(checkpoint: str):
    config, params = ad.load_checkpoint(checkpoint)
    enc_cfg = EncoderConfig.from_json(config["encoder"])
    adapter_cfg = AdapterConfig.from_json(config["adapter"])
    enc = EncoderParams.from_named(enc_cfg, params)
    adapter = AdapterParams.from_named(adapter_cfg, enc_cfg.dim, params)
    phi = make_embedder(config["embedder"])
    return enc, adapter, phi


def cmd_encode(args: argparse.Namespace) -> int:
    enc, adapter, phi = _load_model(args.checkpoint)
    table = _load_table(Path(args.table))
    # Canonical row order makes the emitted file byte-stable: the column
    # representation itself is row-order invariant.
    order = sorted(range(table.m),
                   key=lambda i: tuple(render_cell(v) for v in table.rows[i]))
    canon = Table(name=table.name, columns=table.columns,
                  rows=tuple(table.rows[i] for i in order))
    encoded = encode(embed_cells(canon, phi), enc)
    column_embs = adapt_table(encoded, adapter)
    payload = {
        "table": table.name,
        "columns": [
            {"name": col.name,
             "vectors": [[float(x) for x in q] for q in column_embs.data[j]]}
            for j, col in enumerate(table.columns)
        ],
    }
    out = json.dumps(payload, ensure_ascii=False, indent=1).encode("utf-8")
    if args.output:
        _atomic_write(Path(args.output), out)
    else:
        sys.stdout.write(out.decode("utf-8") + "\n")
    return 0


def cmd_serialize(args: argparse.Namespace) -> int:
    if args.variant not in VARIANTS:
        print(f"unknown variant {args.variant!r}; known: {sorted(VARIANTS)}",
              file=sys.stderr)
        return 2
    table = _load_table(Path(args.table))
    repr_ = serialize_variant(table, args.variant, values_per_col=args.values_per_col)
    sys.stdout.write(repr_.text + "\n")
    return 0


def cmd_gen_align(args: argparse.Namespace) -> int:
    seed = _seed_from(args)
    task = AlignTask(args.task)
    if task not in GENERATED_TASKS:
        print(f"no generator for task {task.value!r}", file=sys.stderr)
        return 2
    tables = [_load_table(p) for p in _table_files(Path(args.tables_dir))]
    if not tables and args.count > 0:
        raise SystemExit("no tables found")
    templates = load_templates(task)
    generate = gen_column_prediction if task is AlignTask.COLUMN_PREDICTION \
        else gen_cell_prediction
    samples = []
    for i in range(args.count):
        rng = np.random.default_rng([seed, i])
        table = tables[i % len(tables)]
        samples.append(generate(table, rng, templates, seed=seed))
    _atomic_write(Path(args.output), export_jsonl(samples))
    print(f"wrote {len(samples)} samples")
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    data = Path(args.samples).read_bytes()
    lines = []
    if args.mode == "slm":
        rows = read_token_scores(data)
        mask = slm_mask(rows, args.threshold)
        for row, keep in zip(rows, mask):
            lines.append(json.dumps(
                {"token": row.token,
                 "score": row.loss_train - row.loss_ref, "keep": keep},
                ensure_ascii=False))
    else:
        for sample in read_tuple_samples(data):
            lines.append(regex_filter(sample).to_json())
    out = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
    if args.output:
        _atomic_write(Path(args.output), out)
    else:
        sys.stdout.write(out.decode("utf-8"))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    failures = 0
    for name, max_err, tol in run_gradient_suite(seed=args.seed or 0):
        status = "ok" if max_err < tol else "FAIL"
        if max_err >= tol:
            failures += 1
        print(f"{status:4s} {name}: max rel err {max_err:.3e} (tol {tol:.0e})")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabenc",
        description="Semantic table encoder pipeline: cleaning, pretraining, "
                    "encoding, serialization, alignment data, and filters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="clean a directory of CSV/JSON tables")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--disable", action="append", metavar="RULE",
                   help="disable a cleaning rule by id")
    p.add_argument("--skip-bad", action="store_true",
                   help="skip unreadable inputs instead of failing")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("pretrain", help="contrastive encoder pretraining")
    p.add_argument("tables_dir")
    p.add_argument("checkpoint")
    p.add_argument("loss_csv")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-tables", type=int, dest="batch_tables")
    p.set_defaults(func=cmd_pretrain, rows_per_snapshot=None)

    p = sub.add_parser("encode", help="emit column embeddings for one table")
    p.add_argument("table")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("serialize", help="print a hybrid table representation")
    p.add_argument("table")
    p.add_argument("--variant", default=CANONICAL_VARIANT)
    p.add_argument("--values-per-col", type=int, default=3, dest="values_per_col")
    p.set_defaults(func=cmd_serialize)

    p = sub.add_parser("gen-align", help="generate alignment samples")
    p.add_argument("tables_dir")
    p.add_argument("output")
    p.add_argument("--task", default=AlignTask.COLUMN_PREDICTION.value,
                   choices=[t.value for t in AlignTask])
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_align)

    p = sub.add_parser("filter", help="run curation filters over JSONL samples")
    p.add_argument("samples")
    p.add_argument("--mode", choices=("slm", "tuple"), required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_SLM_THRESHOLD)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
