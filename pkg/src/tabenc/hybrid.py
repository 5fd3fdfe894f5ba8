"""Hybrid table serialization with embedding slots.

The canonical wire format is a single line:

    table NAME, columns=[NAME.COL(<col_emb>|DTYPE|PK)|[V1,V2,V3], ...]

where PK is ``primary_key`` or empty and each column carries one ``<col_emb>``
slot that downstream splicing replaces with that column's k embedding rows.
Backslash escapes ``, | [ ] \\`` inside names and values, which makes the
format injective and exactly invertible; ``parse`` is the inverse of
``serialize`` over schema and value heads.

A registry of alternate serializers (markdown grid, JSON rows, key-value
records, csv and yaml flavors, each with or without dtypes and value lists)
covers format diversity for prompt construction. Every variant exposes
exactly one slot per column; only the canonical format is parsed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor
from .tables import DTYPES, Table, render_cell

COL_EMB = "<col_emb>"
TAB_OPEN = "<tab>"
TAB_CLOSE = "</tab>"

_ESCAPABLE = ",|[]\\"


class GrammarError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class DimensionMismatch(ValueError):
    pass


class SlotCountMismatch(ValueError):
    pass


def escape(text: str) -> str:
    return "".join("\\" + c if c in _ESCAPABLE else c for c in text)


@dataclass(frozen=True)
class HybridRepr:
    text: str
    slots: tuple[tuple[int, int], ...]  # (char offset of <col_emb>, column index)
    table: str


@dataclass(frozen=True)
class ParsedColumn:
    name: str
    dtype: str
    primary_key: bool
    values: tuple[str, ...]


@dataclass(frozen=True)
class ParsedRepr:
    table: str
    columns: tuple[ParsedColumn, ...]
    slots: tuple[tuple[int, int], ...]


def _value_head(t: Table, j: int, count: int,
                rng: Optional[np.random.Generator]) -> list[str]:
    non_missing = [render_cell(v) for v in t.column_values(j) if v is not None]
    if rng is None or len(non_missing) <= count:
        return non_missing[:count]
    picks = sorted(int(i) for i in rng.choice(len(non_missing), size=count, replace=False))
    return [non_missing[i] for i in picks]


def serialize(t: Table, values_per_col: int = 3,
              rng: Optional[np.random.Generator] = None) -> HybridRepr:
    """Render the canonical hybrid representation. Value heads are the first
    ``values_per_col`` non-missing cells of each column in row order, or a
    seeded sample when ``rng`` is given."""
    parts: list[str] = [f"table {escape(t.name)}, columns=["]
    offset = sum(len(p) for p in parts)
    slots: list[tuple[int, int]] = []
    for j, col in enumerate(t.columns):
        if j:
            parts.append(", ")
            offset += 2
        head = f"{escape(t.name)}.{escape(col.name)}("
        parts.append(head)
        offset += len(head)
        slots.append((offset, j))
        pk = "primary_key" if col.is_primary_key else ""
        values = ",".join(escape(v) for v in _value_head(t, j, values_per_col, rng))
        tail = f"{COL_EMB}|{col.dtype}|{pk})|[{values}]"
        parts.append(tail)
        offset += len(tail)
    parts.append("]")
    return HybridRepr(text="".join(parts), slots=tuple(slots), table=t.name)


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def expect(self, literal: str) -> None:
        if not self.text.startswith(literal, self.pos):
            raise GrammarError(f"expected {literal!r}", self.pos)
        self.pos += len(literal)

    def peek(self, literal: str) -> bool:
        return self.text.startswith(literal, self.pos)

    def until_unescaped(self, stops: str) -> str:
        """Consume and unescape text up to (not including) the first unescaped
        stop character."""
        out: list[str] = []
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c == "\\":
                if self.pos + 1 >= len(self.text):
                    raise GrammarError("dangling escape", self.pos)
                out.append(self.text[self.pos + 1])
                self.pos += 2
                continue
            if c in stops:
                return "".join(out)
            out.append(c)
            self.pos += 1
        raise GrammarError(f"unterminated field, expected one of {stops!r}", self.pos)

    def find_marker(self, marker: str) -> int:
        """Index of the next occurrence of ``marker`` reachable without
        crossing an unescaped stop; escapes inside the gap are fine."""
        i = self.text.find(marker, self.pos)
        if i < 0:
            raise GrammarError(f"missing {marker!r}", self.pos)
        return i


def parse(text: str) -> ParsedRepr:
    """Parse a canonical hybrid representation back into its schema skeleton,
    value heads, and slot offsets."""
    s = _Scanner(text)
    s.expect("table ")
    table = s.until_unescaped(",")
    s.expect(", columns=[")
    columns: list[ParsedColumn] = []
    slots: list[tuple[int, int]] = []
    if s.peek("]"):
        raise GrammarError("empty column list", s.pos)
    while True:
        marker = f"({COL_EMB}|"
        open_paren = s.find_marker(marker)
        qualified = text[s.pos:open_paren]
        prefix = escape(table) + "."
        if not qualified.startswith(prefix):
            raise GrammarError(f"column is not qualified by table {table!r}", s.pos)
        name = _unescape(qualified[len(prefix):], s.pos + len(prefix))
        slots.append((open_paren + 1, len(columns)))
        s.pos = open_paren + len(marker)
        dtype = s.until_unescaped("|")
        if dtype not in DTYPES:
            raise GrammarError(f"unknown dtype {dtype!r}", s.pos - len(dtype))
        s.expect("|")
        pk_field = s.until_unescaped(")")
        if pk_field not in ("", "primary_key"):
            raise GrammarError(f"bad primary-key field {pk_field!r}", s.pos - len(pk_field))
        s.expect(")|[")
        values: list[str] = []
        if s.peek("]"):
            s.pos += 1
        else:
            while True:
                values.append(s.until_unescaped(",]"))
                if s.text[s.pos] == ",":
                    s.pos += 1
                    continue
                s.pos += 1
                break
        columns.append(ParsedColumn(name=name, dtype=dtype,
                                    primary_key=pk_field == "primary_key",
                                    values=tuple(values)))
        if s.peek(", "):
            s.pos += 2
            continue
        s.expect("]")
        break
    if s.pos != len(text):
        raise GrammarError("trailing characters after column list", s.pos)
    return ParsedRepr(table=table, columns=tuple(columns), slots=tuple(slots))


def _unescape(text: str, base: int) -> str:
    out: list[str] = []
    i = 0
    while i < len(text):
        if text[i] == "\\":
            if i + 1 >= len(text):
                raise GrammarError("dangling escape", base + i)
            out.append(text[i + 1])
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


# -- token-level splicing ------------------------------------------------------

_SPECIAL_UNITS = (COL_EMB, TAB_OPEN, TAB_CLOSE)


def tokenize_units(text: str) -> list[str]:
    """Split text into embedding units: the special markers stay single units,
    everything between them splits on whitespace."""
    units: list[str] = []
    rest = text
    while rest:
        hits = [(rest.find(sp), sp) for sp in _SPECIAL_UNITS if rest.find(sp) >= 0]
        if not hits:
            units.extend(rest.split())
            break
        cut, special = min(hits)
        units.extend(rest[:cut].split())
        units.append(special)
        rest = rest[cut + len(special):]
    return units


@dataclass(frozen=True)
class SplicedSequence:
    """Embedding rows ready for a downstream consumer, with per-row origin:
    ("text", unit) for ordinary tokens, ("column", j, q) for query row q of
    column j."""

    rows: np.ndarray  # (length, out_dim)
    origins: tuple[tuple, ...]


def splice(repr_: HybridRepr, token_embedder: Callable[[str], np.ndarray],
           column_embs: Tensor) -> SplicedSequence:
    """Replace each ``<col_emb>`` unit with that column's k embedding rows and
    embed every other unit as text. Output length is always
    (unit count) - n + n*k."""
    if column_embs.ndim != 3:
        raise DimensionMismatch(
            f"expected (n, k, out_dim) column embeddings, got {column_embs.shape}")
    n, k, out_dim = column_embs.shape
    units = tokenize_units(repr_.text)
    slot_units = sum(1 for u in units if u == COL_EMB)
    if slot_units != len(repr_.slots) or n != len(repr_.slots):
        raise SlotCountMismatch(
            f"{slot_units} slot units, {len(repr_.slots)} recorded slots, n={n}")
    rows: list[np.ndarray] = []
    origins: list[tuple] = []
    col = 0
    for unit in units:
        if unit == COL_EMB:
            for q in range(k):
                rows.append(np.asarray(column_embs.data[col, q]))
                origins.append(("column", col, q))
            col += 1
            continue
        vec = np.asarray(token_embedder(unit))
        if vec.shape != (out_dim,):
            raise DimensionMismatch(
                f"token embedder returned {vec.shape}, expected ({out_dim},)")
        rows.append(vec)
        origins.append(("text", unit))
    out = SplicedSequence(rows=np.stack(rows), origins=tuple(origins))
    assert len(out.origins) == len(units) - n + n * k
    return out


# -- serializer variants -------------------------------------------------------

def _column_label(t: Table, j: int, with_dtype: bool) -> str:
    col = t.columns[j]
    bits = [COL_EMB]
    if with_dtype:
        bits.append(col.dtype)
        if col.is_primary_key:
            bits.append("primary_key")
    return f"{col.name} ({', '.join(bits)})"


def _values_text(t: Table, j: int, count: int, sep: str) -> str:
    return sep.join(render_cell(v) for v in t.column_values(j)[:count]
                    if v is not None) if count else ""


def _render_markdown(t: Table, with_dtype: bool, with_values: bool,
                     values_per_col: int) -> str:
    header = "| " + " | ".join(_column_label(t, j, with_dtype)
                               for j in range(t.n)) + " |"
    lines = [f"# table {t.name}", header,
             "|" + "|".join([" --- "] * t.n) + "|"]
    if with_values:
        for row in t.rows[:values_per_col]:
            lines.append("| " + " | ".join(render_cell(v) for v in row) + " |")
    return "\n".join(lines)


def _render_json(t: Table, with_dtype: bool, with_values: bool,
                 values_per_col: int) -> str:
    import json as _json

    cols = []
    for j, col in enumerate(t.columns):
        entry: dict = {"name": col.name, "embed": COL_EMB}
        if with_dtype:
            entry["dtype"] = col.dtype
            entry["primary_key"] = col.is_primary_key
        if with_values:
            entry["values"] = [render_cell(v) for v in t.column_values(j)[:values_per_col]
                               if v is not None]
        cols.append(entry)
    return _json.dumps({"table": t.name, "columns": cols}, ensure_ascii=False)


def _render_keyvalue(t: Table, with_dtype: bool, with_values: bool,
                     values_per_col: int) -> str:
    lines = [f"table: {t.name}"]
    for j, col in enumerate(t.columns):
        bits = [f"column: {col.name}", f"embed={COL_EMB}"]
        if with_dtype:
            bits.append(f"dtype={col.dtype}")
            bits.append(f"pk={'yes' if col.is_primary_key else 'no'}")
        if with_values:
            bits.append(f"values={_values_text(t, j, values_per_col, '; ')}")
        lines.append(" ".join(bits))
    return "\n".join(lines)


def _render_csv(t: Table, with_dtype: bool, with_values: bool,
                values_per_col: int) -> str:
    fields = ["name", "embed"] + (["dtype", "primary_key"] if with_dtype else []) \
        + (["values"] if with_values else [])
    lines = [f"table,{t.name}", ",".join(fields)]
    for j, col in enumerate(t.columns):
        row = [col.name, COL_EMB]
        if with_dtype:
            row.extend([col.dtype, "true" if col.is_primary_key else "false"])
        if with_values:
            row.append(_values_text(t, j, values_per_col, "/"))
        lines.append(",".join(row))
    return "\n".join(lines)


def _render_yaml(t: Table, with_dtype: bool, with_values: bool,
                 values_per_col: int) -> str:
    lines = [f"table: {t.name}", "columns:"]
    for j, col in enumerate(t.columns):
        lines.append(f"  - name: {col.name}")
        lines.append(f"    embed: {COL_EMB}")
        if with_dtype:
            lines.append(f"    dtype: {col.dtype}")
            lines.append(f"    primary_key: {str(col.is_primary_key).lower()}")
        if with_values:
            lines.append(f"    values: [{_values_text(t, j, values_per_col, ', ')}]")
    return "\n".join(lines)


_BASES: dict[str, Callable[[Table, bool, bool, int], str]] = {
    "pipe": None,  # canonical, handled specially
    "markdown": _render_markdown,
    "json": _render_json,
    "keyvalue": _render_keyvalue,
    "csv": _render_csv,
    "yaml": _render_yaml,
}


def _slotted(text: str, table: str) -> HybridRepr:
    slots = []
    start = 0
    while True:
        i = text.find(COL_EMB, start)
        if i < 0:
            break
        slots.append((i, len(slots)))
        start = i + len(COL_EMB)
    return HybridRepr(text=text, slots=tuple(slots), table=table)


def _render_pipe(t: Table, with_dtype: bool, with_values: bool,
                 values_per_col: int) -> str:
    # Same skeleton as the canonical grammar with the dtype/value fields
    # optionally blanked; the full flavor is byte-identical to serialize().
    parts = [f"table {escape(t.name)}, columns=["]
    for j, col in enumerate(t.columns):
        if j:
            parts.append(", ")
        pk = "primary_key" if col.is_primary_key else ""
        dtype = col.dtype if with_dtype else ""
        values = ",".join(escape(v) for v in _value_head(t, j, values_per_col, None)) \
            if with_values else ""
        parts.append(f"{escape(t.name)}.{escape(col.name)}"
                     f"({COL_EMB}|{dtype}|{pk})|[{values}]")
    parts.append("]")
    return "".join(parts)


VARIANTS: dict[str, Callable[[Table, int], HybridRepr]] = {}


def _register_variants() -> None:
    renderers = dict(_BASES)
    renderers["pipe"] = _render_pipe
    for base, renderer in renderers.items():
        for with_dtype in (True, False):
            for with_values in (True, False):
                vid = base + ("+dtype" if with_dtype else "") \
                    + ("+values" if with_values else "")

                def make(renderer=renderer, with_dtype=with_dtype,
                         with_values=with_values):
                    def run(t: Table, values_per_col: int = 3) -> HybridRepr:
                        return _slotted(
                            renderer(t, with_dtype, with_values, values_per_col),
                            t.name)
                    return run

                VARIANTS[vid] = make()


_register_variants()

CANONICAL_VARIANT = "pipe+dtype+values"


def serialize_variant(t: Table, variant: str, values_per_col: int = 3) -> HybridRepr:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}")
    if variant == CANONICAL_VARIANT:
        return serialize(t, values_per_col=values_per_col)
    return VARIANTS[variant](t, values_per_col)


def wrap_in_tab_span(repr_: HybridRepr) -> str:
    """The prompt-embedding form: the representation between the table
    delimiter tokens."""
    return f"{TAB_OPEN}{repr_.text}{TAB_CLOSE}"
