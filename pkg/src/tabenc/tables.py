"""Table data model: CSV/JSON ingestion, dtype inference, rule-based cleaning,
and row-subsampled snapshots for contrastive training.

A Table is an immutable rectangular grid of typed cells plus per-column
metadata. Cleaning applies a fixed, documented rule order (transpose check,
duplicate columns, underscore columns, over-long fields, NaN-heavy columns and
rows, header-echo columns, final size gate) and reports everything it did.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, replace
from datetime import date, datetime
from typing import Any, Callable, Iterable, Optional

import numpy as np

DTYPES = ("bool", "int", "float", "datetime", "text")

# Raw-text markers treated as missing on CSV ingest. The canonical JSON format
# encodes missing as null instead, so the lexicon does not apply there.
MISSING_MARKERS = frozenset({"", "NaN", "nan", "null", "NULL", "-"})

_INT_RE = re.compile(r"[+-]?\d+\Z")
_FLOAT_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\Z")
_DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}\Z")
_DATETIME_RE = re.compile(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}(:\d{2}(\.\d{1,6})?)?\Z")


class MalformedCsv(ValueError):
    """CSV input is ragged or not valid UTF-8."""


class EmptyInput(ValueError):
    """No records to build a table from."""


class InvalidSampleSize(ValueError):
    """Snapshot row count outside [1, m]."""


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    dtype: str = "text"
    is_primary_key: bool = False

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("column name is empty")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")


# Cells are plain Python scalars; None marks a missing value. The value of a
# non-missing cell always matches its column dtype (bool/int/float/str and
# date or datetime for the "datetime" dtype).
Cell = Any


def render_cell(value: Cell) -> str:
    """Canonical text for a cell: ints without decimal point, floats in
    shortest round-trip form, bools lowercase, datetimes in ISO-8601,
    missing as the empty string."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (date, datetime)):
        return value.isoformat()
    return str(value)


def parse_value(text: str, dtype: str) -> Cell:
    """Parse a raw string under ``dtype``; raises ValueError when it does not
    conform. Text is the universal fallback and never fails."""
    if dtype == "text":
        return text
    if dtype == "bool":
        if text == "true":
            return True
        if text == "false":
            return False
        raise ValueError(f"not a bool: {text!r}")
    if dtype == "int":
        if not _INT_RE.match(text):
            raise ValueError(f"not an int: {text!r}")
        return int(text)
    if dtype == "float":
        if not _FLOAT_RE.match(text):
            raise ValueError(f"not a float: {text!r}")
        return float(text)
    if dtype == "datetime":
        if _DATE_RE.match(text):
            return date.fromisoformat(text)
        if _DATETIME_RE.match(text):
            return datetime.fromisoformat(text)
        raise ValueError(f"not an ISO-8601 date/datetime: {text!r}")
    raise ValueError(f"unknown dtype {dtype!r}")


def _parses(text: str, dtype: str) -> bool:
    try:
        parse_value(text, dtype)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class Table:
    """Immutable rectangular table. ``rows`` is row-major, one tuple per row;
    every row has exactly ``len(columns)`` cells."""

    name: str
    columns: tuple[ColumnMeta, ...]
    rows: tuple[tuple[Cell, ...], ...]

    def __post_init__(self) -> None:
        if not self.columns:
            raise ValueError("table needs at least one column")
        if not self.rows:
            raise ValueError("table needs at least one row")
        n = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != n:
                raise ValueError(f"row {i} has {len(row)} cells, expected {n}")

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def n(self) -> int:
        return len(self.columns)

    def column_values(self, j: int) -> list[Cell]:
        return [row[j] for row in self.rows]

    def rendered(self) -> list[list[str]]:
        return [[render_cell(v) for v in row] for row in self.rows]


def table_from_text(
    name: str,
    column_names: Iterable[str],
    text_rows: Iterable[Iterable[Optional[str]]],
) -> Table:
    """Build an all-text Table from raw strings; None entries stay missing."""
    cols = tuple(ColumnMeta(c) for c in column_names)
    rows = tuple(tuple(r) for r in text_rows)
    return Table(name=name, columns=cols, rows=rows)


def parse_csv(data: bytes, has_header: bool = True, name: str = "table") -> Table:
    """Parse UTF-8 CSV bytes into an all-text Table.

    The first record supplies column names when ``has_header`` is set,
    otherwise columns are named col_0..col_{n-1}. Fields in the missing-marker
    lexicon become missing cells. Ragged records raise MalformedCsv.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"input is not valid UTF-8: {exc}") from exc
    records = [row for row in csv.reader(io.StringIO(text, newline=""))]
    if not records:
        raise EmptyInput("no CSV records")
    if has_header:
        header, body = records[0], records[1:]
    else:
        header = [f"col_{j}" for j in range(len(records[0]))]
        body = records
    if not body:
        raise EmptyInput("no data rows")
    n = len(header)
    for i, rec in enumerate(body):
        if len(rec) != n:
            raise MalformedCsv(f"ragged row {i}: {len(rec)} fields, expected {n}")
    rows = tuple(
        tuple(None if f in MISSING_MARKERS else f for f in rec) for rec in body
    )
    return Table(name=name, columns=tuple(ColumnMeta(h) for h in header), rows=rows)


def to_csv(t: Table) -> bytes:
    """Serialize to UTF-8 CSV with a header row. Missing cells are written as
    empty fields, so text cells equal to a missing marker do not round-trip."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([c.name for c in t.columns])
    for row in t.rows:
        writer.writerow([render_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def infer_dtypes(t: Table) -> Table:
    """Assign each column the most specific dtype under which every
    non-missing cell parses (bool > int > float > datetime > text) and re-type
    the cells. Columns with no non-missing cells stay text."""
    new_cols = []
    dtypes = []
    for j, col in enumerate(t.columns):
        texts = [render_cell(v) if not isinstance(v, str) else v
                 for v in t.column_values(j) if v is not None]
        chosen = "text"
        if texts:
            for dtype in ("bool", "int", "float", "datetime"):
                if all(_parses(s, dtype) for s in texts):
                    chosen = dtype
                    break
        dtypes.append(chosen)
        new_cols.append(replace(col, dtype=chosen))
    new_rows = tuple(
        tuple(
            None if v is None else parse_value(
                v if isinstance(v, str) else render_cell(v), dtypes[j])
            for j, v in enumerate(row)
        )
        for row in t.rows
    )
    return Table(name=t.name, columns=tuple(new_cols), rows=new_rows)


# -- canonical JSON table format ---------------------------------------------

def _cell_to_json(value: Cell) -> Any:
    if isinstance(value, (date, datetime)):
        return value.isoformat()
    return value


def _cell_from_json(value: Any, dtype: str) -> Cell:
    if value is None:
        return None
    if dtype == "datetime":
        return parse_value(value, "datetime")
    expected = {"bool": bool, "int": int, "float": (int, float), "text": str}[dtype]
    if dtype in ("int", "float") and isinstance(value, bool):
        raise ValueError(f"cell {value!r} does not match dtype {dtype}")
    if not isinstance(value, expected):
        raise ValueError(f"cell {value!r} does not match dtype {dtype}")
    return float(value) if dtype == "float" else value


def table_to_json(t: Table) -> str:
    obj = {
        "name": t.name,
        "columns": [
            {"name": c.name, "dtype": c.dtype, "primary_key": c.is_primary_key}
            for c in t.columns
        ],
        "rows": [[_cell_to_json(v) for v in row] for row in t.rows],
    }
    return json.dumps(obj, ensure_ascii=False)


def table_from_json(text: str) -> Table:
    obj = json.loads(text)
    cols = tuple(
        ColumnMeta(c["name"], c["dtype"], bool(c.get("primary_key", False)))
        for c in obj["columns"]
    )
    rows = tuple(
        tuple(_cell_from_json(v, cols[j].dtype) for j, v in enumerate(row))
        for row in obj["rows"]
    )
    return Table(name=obj["name"], columns=cols, rows=rows)


# -- cleaning -----------------------------------------------------------------

@dataclass(frozen=True)
class RuleSet:
    """Knobs for the cleaning rules. Disable a rule by name via ``disabled``;
    ``horizontal_detector`` overrides the built-in orientation heuristic."""

    nan_fraction: float = 0.30
    max_field_chars: int = 100
    min_rows: int = 5
    min_cols: int = 2
    disabled: frozenset[str] = frozenset()
    horizontal_detector: Optional[Callable[[Table], bool]] = None

    def enabled(self, rule_id: str) -> bool:
        return rule_id not in self.disabled


@dataclass(frozen=True)
class RuleEvent:
    rule_id: str
    action: str  # drop-column | drop-row | transpose | reject | none
    detail: str


@dataclass(frozen=True)
class CleanReport:
    table: Optional[Table]  # None when rejected
    reasons: tuple[str, ...]  # non-empty iff rejected
    log: tuple[RuleEvent, ...]

    @property
    def accepted(self) -> bool:
        return self.table is not None

    @property
    def fired_rules(self) -> list[str]:
        return [e.rule_id for e in self.log if e.action != "none"]

    def to_json(self) -> str:
        return json.dumps(
            {
                "accepted": self.accepted,
                "reasons": list(self.reasons),
                "log": [
                    {"rule": e.rule_id, "action": e.action, "detail": e.detail}
                    for e in self.log
                ],
            },
            ensure_ascii=False,
        )


def _specific_dtype(texts: list[str]) -> Optional[str]:
    """The most specific non-text dtype covering all strings, if any."""
    if not texts:
        return None
    for dtype in ("bool", "int", "float", "datetime"):
        if all(_parses(s, dtype) for s in texts):
            return dtype
    return None


def looks_horizontal(t: Table) -> bool:
    """Orientation heuristic: a table is horizontal when strictly more rows
    than columns carry a homogeneous non-text dtype, skipping each row's first
    cell (the putative header label living in the leading column)."""
    rendered = t.rendered()
    hom_cols = 0
    for j in range(t.n):
        vals = [rendered[i][j] for i in range(t.m) if t.rows[i][j] is not None]
        if _specific_dtype(vals):
            hom_cols += 1
    hom_rows = 0
    for i in range(t.m):
        vals = [rendered[i][j] for j in range(1, t.n) if t.rows[i][j] is not None]
        if _specific_dtype(vals):
            hom_rows += 1
    return hom_rows > hom_cols


def transpose_table(t: Table) -> Table:
    """Flip a horizontally-stored table: the full grid (header labels plus
    cells) is transposed, so the old first row becomes the new header."""
    full: list[list[str]] = [[c.name for c in t.columns]]
    full.extend([render_cell(v) for v in row] for row in t.rows)
    flipped = [[full[i][j] for i in range(len(full))] for j in range(len(full[0]))]
    header = []
    for j, h in enumerate(flipped[0]):
        header.append(h if h.strip() else f"column_{j}")
    rows = tuple(
        tuple(None if f in MISSING_MARKERS else f for f in rec)
        for rec in flipped[1:]
    )
    return infer_dtypes(Table(name=t.name, columns=tuple(ColumnMeta(h) for h in header), rows=rows))


def _drop_columns(t: Table, idx: set[int]) -> Optional[Table]:
    keep = [j for j in range(t.n) if j not in idx]
    if not keep:
        return None
    cols = tuple(t.columns[j] for j in keep)
    rows = tuple(tuple(row[j] for j in keep) for row in t.rows)
    return Table(name=t.name, columns=cols, rows=rows)


def _drop_rows(t: Table, idx: set[int]) -> Optional[Table]:
    keep = [i for i in range(t.m) if i not in idx]
    if not keep:
        return None
    return Table(name=t.name, columns=t.columns, rows=tuple(t.rows[i] for i in keep))


def clean(t: Table, rules: RuleSet = RuleSet()) -> CleanReport:
    """Apply the cleaning rules in a fixed order: transpose check, duplicate
    columns (case-insensitive, first kept), underscore-only columns, columns
    with fields over the length cap, columns then rows above the NaN fraction,
    columns whose first value repeats the column name, and the final size
    gate. Column/row drops iterate to a fixed point so cleaning is idempotent.
    Rejection is a verdict, not an error.
    """
    log: list[RuleEvent] = []
    cur: Optional[Table] = infer_dtypes(t)

    if rules.enabled("transpose"):
        detector = rules.horizontal_detector or looks_horizontal
        if detector(cur):
            cur = transpose_table(cur)
            log.append(RuleEvent("transpose", "transpose", "horizontal layout detected"))

    def reject(reasons: list[str]) -> CleanReport:
        for r in reasons:
            log.append(RuleEvent("size-gate", "reject", r))
        return CleanReport(table=None, reasons=tuple(reasons), log=tuple(log))

    # Column/row repairs loop until stable: dropping a NaN-heavy column can
    # push a row over the threshold and vice versa.
    while True:
        fired = False

        if rules.enabled("duplicate-columns"):
            seen: dict[str, int] = {}
            dup: set[int] = set()
            for j, col in enumerate(cur.columns):
                key = col.name.strip().lower()
                if key in seen:
                    dup.add(j)
                    log.append(RuleEvent(
                        "duplicate-columns", "drop-column",
                        f"{col.name!r} duplicates column {seen[key]} ignoring case"))
                else:
                    seen[key] = j
            if dup:
                fired = True
                cur = _drop_columns(cur, dup)
                if cur is None:
                    return reject(["TooFewColumns"])

        if rules.enabled("underscore-columns"):
            drop: set[int] = set()
            for j, col in enumerate(cur.columns):
                vals = [render_cell(v) for v in cur.column_values(j) if v is not None]
                if vals and all(re.fullmatch(r"_+", s) for s in vals):
                    drop.add(j)
                    log.append(RuleEvent(
                        "underscore-columns", "drop-column",
                        f"{col.name!r} contains only underscores"))
            if drop:
                fired = True
                cur = _drop_columns(cur, drop)
                if cur is None:
                    return reject(["TooFewColumns"])

        if rules.enabled("long-fields"):
            drop = set()
            for j, col in enumerate(cur.columns):
                if any(v is not None and len(render_cell(v)) > rules.max_field_chars
                       for v in cur.column_values(j)):
                    drop.add(j)
                    log.append(RuleEvent(
                        "long-fields", "drop-column",
                        f"{col.name!r} has a field over {rules.max_field_chars} characters"))
            if drop:
                fired = True
                cur = _drop_columns(cur, drop)
                if cur is None:
                    return reject(["TooFewColumns"])

        if rules.enabled("column-nan"):
            drop = set()
            for j, col in enumerate(cur.columns):
                missing = sum(1 for v in cur.column_values(j) if v is None)
                if missing / cur.m > rules.nan_fraction:
                    drop.add(j)
                    log.append(RuleEvent(
                        "column-nan", "drop-column",
                        f"{col.name!r} is {missing}/{cur.m} missing"))
            if drop:
                fired = True
                cur = _drop_columns(cur, drop)
                if cur is None:
                    return reject(["TooFewColumns"])

        if rules.enabled("row-nan"):
            drop_rows: set[int] = set()
            for i, row in enumerate(cur.rows):
                missing = sum(1 for v in row if v is None)
                if missing / cur.n > rules.nan_fraction:
                    drop_rows.add(i)
                    log.append(RuleEvent(
                        "row-nan", "drop-row", f"row {i} is {missing}/{cur.n} missing"))
            if drop_rows:
                fired = True
                cur = _drop_rows(cur, drop_rows)
                if cur is None:
                    return reject(["TooFewRows"])

        if rules.enabled("first-value-equals-name"):
            drop = set()
            for j, col in enumerate(cur.columns):
                first = cur.rows[0][j]
                if first is not None and render_cell(first).strip() == col.name.strip():
                    drop.add(j)
                    log.append(RuleEvent(
                        "first-value-equals-name", "drop-column",
                        f"{col.name!r} starts with its own name"))
            if drop:
                fired = True
                cur = _drop_columns(cur, drop)
                if cur is None:
                    return reject(["TooFewColumns"])

        if not fired:
            break

    reasons = []
    if rules.enabled("size-gate"):
        if cur.m < rules.min_rows:
            reasons.append("TooFewRows")
        if cur.n < rules.min_cols:
            reasons.append("TooFewColumns")
    if reasons:
        return reject(reasons)
    return CleanReport(table=infer_dtypes(cur), reasons=(), log=tuple(log))


# -- snapshots ----------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    parent: str  # parent table name
    indices: tuple[int, ...]  # strictly increasing row indices into the parent
    table: Table  # materialized view

    def __post_init__(self) -> None:
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("snapshot indices must be strictly increasing")


@dataclass(frozen=True)
class SnapshotPair:
    a: Snapshot
    b: Snapshot


def _take_rows(t: Table, indices: tuple[int, ...]) -> Table:
    return Table(name=t.name, columns=t.columns,
                 rows=tuple(t.rows[i] for i in indices))


def sample_snapshot_pair(
    t: Table, r: int, rng: np.random.Generator, disjoint: bool = False
) -> SnapshotPair:
    """Draw two row snapshots of ``r`` rows each, sampled uniformly without
    replacement. The two draws are independent unless ``disjoint`` is set, in
    which case 2r distinct rows are split between them."""
    if r < 1 or r > t.m:
        raise InvalidSampleSize(f"r={r} not in [1, {t.m}]")
    if disjoint:
        if 2 * r > t.m:
            raise InvalidSampleSize(f"disjoint draws need 2r <= m, got r={r}, m={t.m}")
        both = rng.choice(t.m, size=2 * r, replace=False)
        idx_a = tuple(sorted(int(i) for i in both[:r]))
        idx_b = tuple(sorted(int(i) for i in both[r:]))
    else:
        idx_a = tuple(sorted(int(i) for i in rng.choice(t.m, size=r, replace=False)))
        idx_b = tuple(sorted(int(i) for i in rng.choice(t.m, size=r, replace=False)))
    return SnapshotPair(
        a=Snapshot(t.name, idx_a, _take_rows(t, idx_a)),
        b=Snapshot(t.name, idx_b, _take_rows(t, idx_b)),
    )
