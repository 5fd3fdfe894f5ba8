"""Seeded synthetic table corpus for pretraining experiments and tests.

Each table mixes columns drawn from distinct generator families (integer
identifiers, Gaussian floats, city names, date ranges), with per-column
parameters varied so different columns have genuinely different value
distributions.
"""

from __future__ import annotations

from datetime import date, timedelta

import numpy as np

from .tables import ColumnMeta, Table

CITY_LEXICON = (
    "Paris", "Rome", "Oslo", "Bern", "Kyiv", "Lima", "Cairo", "Tokyo",
    "Delhi", "Quito", "Accra", "Hanoi", "Sofia", "Riga", "Baku", "Dakar",
    "Seoul", "Lagos", "Dublin", "Vienna", "Madrid", "Lisbon", "Warsaw",
    "Prague", "Athens", "Helsinki", "Tallinn", "Nairobi", "Bogota", "Manila",
)

_GENERATOR_KINDS = ("int_id", "gauss", "city", "date")


def _gen_column(kind: str, m: int, rng: np.random.Generator,
                salt: int) -> tuple[str, str, list]:
    """One synthetic column: returns (name, dtype, values)."""
    if kind == "int_id":
        start = int(rng.integers(0, 10_000)) + 1000 * salt
        step = int(rng.integers(1, 7))
        return f"id_{salt}", "int", [start + step * i for i in range(m)]
    if kind == "gauss":
        mean = float(rng.normal(0, 50)) + 10.0 * salt
        scale = float(rng.uniform(0.5, 20.0))
        vals = [round(float(v), 3) for v in rng.normal(mean, scale, size=m)]
        return f"metric_{salt}", "float", vals
    if kind == "city":
        offset = int(rng.integers(0, len(CITY_LEXICON)))
        width = int(rng.integers(5, 12))
        pool = [CITY_LEXICON[(offset + i) % len(CITY_LEXICON)] for i in range(width)]
        return f"city_{salt}", "text", [pool[int(i)] for i in rng.integers(0, width, size=m)]
    if kind == "date":
        base = date(2000, 1, 1) + timedelta(days=int(rng.integers(0, 8000)))
        stride = int(rng.integers(1, 30))
        return (f"when_{salt}", "datetime",
                [base + timedelta(days=stride * i + int(rng.integers(0, stride)))
                 for i in range(m)])
    raise ValueError(f"unknown generator {kind!r}")


def synthetic_table(name: str, rng: np.random.Generator, rows: int = 16,
                    min_cols: int = 3, max_cols: int = 5) -> Table:
    n = int(rng.integers(min_cols, max_cols + 1))
    kinds = [str(k) for k in rng.choice(_GENERATOR_KINDS, size=n, replace=True)]
    cols: list[ColumnMeta] = []
    values: list[list] = []
    for j, kind in enumerate(kinds):
        col_name, dtype, vals = _gen_column(kind, rows, rng, salt=j)
        cols.append(ColumnMeta(col_name, dtype, is_primary_key=(j == 0 and kind == "int_id")))
        values.append(vals)
    grid = tuple(tuple(values[j][i] for j in range(n)) for i in range(rows))
    return Table(name=name, columns=tuple(cols), rows=grid)


def synthetic_corpus(count: int = 64, seed: int = 7, rows: int = 16) -> list[Table]:
    rng = np.random.default_rng(seed)
    return [synthetic_table(f"synth_{i:03d}", rng, rows=rows) for i in range(count)]
