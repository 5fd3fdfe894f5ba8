"""Training-data curation: token-level selective masking and rule-based
filtering of query/table/output tuples.

The token mask keeps tokens whose training-model loss exceeds the
reference-model loss by at least a threshold (0.6 by default), the idea being
that only tokens the model still has something to learn from contribute to
the loss. Tuple filtering rejects outputs that redefine the input table
inline, outputs whose code dialect contradicts the declared kind, and outputs
made of comments only.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

DEFAULT_SLM_THRESHOLD = 0.6


@dataclass(frozen=True)
class TokenScoreRow:
    token: str
    loss_ref: float
    loss_train: float

    def __post_init__(self) -> None:
        for value in (self.loss_ref, self.loss_train):
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"losses must be finite and >= 0, got {value}")


def slm_mask(rows: list[TokenScoreRow], threshold: float = DEFAULT_SLM_THRESHOLD) -> list[bool]:
    """Keep token i iff loss_train_i - loss_ref_i >= threshold. Tokens below
    the threshold are masked out of the training loss."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return [(row.loss_train - row.loss_ref) >= threshold for row in rows]


def read_token_scores(data: bytes) -> list[TokenScoreRow]:
    rows = []
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rows.append(TokenScoreRow(token=obj["token"], loss_ref=float(obj["loss_ref"]),
                                  loss_train=float(obj["loss_train"])))
    return rows


# -- tuple filtering -----------------------------------------------------------

KINDS = ("python", "sql", "prose")


@dataclass(frozen=True)
class TupleSample:
    query: str
    table_info: str
    output: str
    kind: str  # declared output kind

    def __post_init__(self) -> None:
        for name in ("query", "table_info", "output"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-empty")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")


@dataclass(frozen=True)
class FiredRule:
    rule_id: str
    span: str


@dataclass(frozen=True)
class FilterVerdict:
    accept: bool
    fired: tuple[FiredRule, ...]

    def to_json(self) -> str:
        return json.dumps({"accept": self.accept,
                           "fired": [{"rule": f.rule_id, "span": f.span}
                                     for f in self.fired]},
                          ensure_ascii=False)


_FENCE_RE = re.compile(r"```(\w+)?")
_DATAFRAME_RE = re.compile(r"DataFrame\s*\(\s*\{(.*?)\}", re.DOTALL)
_CREATE_TABLE_RE = re.compile(r"CREATE\s+TABLE\s+\w+\s*\((.*?)\)",
                              re.IGNORECASE | re.DOTALL)
_DICT_KEY_RE = re.compile(r"""["']([^"']+)["']\s*:""")
_SQL_MARKERS = re.compile(r"\b(SELECT|INSERT|UPDATE|DELETE|CREATE|ALTER)\b\s", re.IGNORECASE)
_PY_MARKERS = re.compile(r"^\s*(import |from \w+ import |def |class |print\(|pd\.|df\b)",
                         re.MULTILINE)

# Pluggable executability checks; the default performs none and reports so.
ExecChecker = Callable[[TupleSample], str]


def no_exec_check(sample: TupleSample) -> str:
    return "not-checked"


def _header_names(table_info: str) -> set[str]:
    """Best-effort header extraction from the table_info text: canonical
    hybrid strings, else markdown-style or comma lists on the first lines."""
    from .hybrid import GrammarError, parse

    try:
        return {c.name for c in parse(table_info).columns}
    except GrammarError:
        pass
    first = next((line for line in table_info.splitlines() if line.strip()), "")
    if "|" in first:
        return {f.strip() for f in first.strip().strip("|").split("|") if f.strip()}
    return {f.strip() for f in first.split(",") if f.strip()}


def _strip_fences(output: str) -> str:
    return "\n".join(line for line in output.splitlines()
                     if not line.strip().startswith("```"))


def _rule_redefined_table(sample: TupleSample) -> Optional[FiredRule]:
    """Inline tabular constructors in the output must agree with the headers
    the table_info declares."""
    declared: Optional[set[str]] = None
    span = ""
    m = _DATAFRAME_RE.search(sample.output)
    if m:
        declared = set(_DICT_KEY_RE.findall(m.group(1)))
        span = m.group(0)[:80]
    else:
        m = _CREATE_TABLE_RE.search(sample.output)
        if m:
            declared = {f.strip().split()[0].strip('`"') for f in m.group(1).split(",")
                        if f.strip()}
            span = m.group(0)[:80]
    if declared is None:
        return None
    if declared != _header_names(sample.table_info):
        return FiredRule("redefined-table", span)
    return None


def _rule_kind_mismatch(sample: TupleSample) -> Optional[FiredRule]:
    fences = [f.lower() for f in _FENCE_RE.findall(sample.output) if f]
    for fence in fences:
        if fence in ("python", "py") and sample.kind != "python":
            return FiredRule("kind-mismatch", f"```{fence}")
        if fence == "sql" and sample.kind != "sql":
            return FiredRule("kind-mismatch", f"```{fence}")
    body = _strip_fences(sample.output)
    if sample.kind == "python" and _SQL_MARKERS.search(body) and not _PY_MARKERS.search(body):
        return FiredRule("kind-mismatch", _SQL_MARKERS.search(body).group(0).strip())
    if sample.kind == "sql" and _PY_MARKERS.search(body) and not _SQL_MARKERS.search(body):
        return FiredRule("kind-mismatch", _PY_MARKERS.search(body).group(0).strip())
    return None


_COMMENT_PREFIX = {"python": "#", "sql": "--"}


def _rule_comment_only(sample: TupleSample) -> Optional[FiredRule]:
    if sample.kind == "prose":
        return None
    prefix = _COMMENT_PREFIX[sample.kind]
    lines = [line.strip() for line in _strip_fences(sample.output).splitlines()
             if line.strip()]
    if lines and all(line.startswith(prefix) for line in lines):
        return FiredRule("comment-only", lines[0][:80])
    return None


_TUPLE_RULES = (_rule_redefined_table, _rule_kind_mismatch, _rule_comment_only)


def regex_filter(sample: TupleSample,
                 exec_checker: ExecChecker = no_exec_check) -> FilterVerdict:
    """Apply the rule predicates in order and collect everything that fired.
    The sample is accepted iff nothing fired; the executability checker is
    informational only unless it returns "failed"."""
    fired = [hit for rule in _TUPLE_RULES if (hit := rule(sample)) is not None]
    if exec_checker(sample) == "failed":
        fired.append(FiredRule("not-executable", ""))
    return FilterVerdict(accept=not fired, fired=tuple(fired))


def read_tuple_samples(data: bytes) -> list[TupleSample]:
    samples = []
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        samples.append(TupleSample(query=obj["query"], table_info=obj["table_info"],
                                   output=obj["output"], kind=obj["kind"]))
    return samples
