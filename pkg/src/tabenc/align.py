"""Synthetic table-language alignment samples.

Two generator-backed tasks: column prediction (given a cell value, answer
which column owns it) and cell prediction (given a column, answer with one of
its values). Prompts carry the table as a hybrid representation wrapped in
the <tab>/</tab> delimiter tokens; targets are checked against the source
table by a membership oracle. Three further task kinds (question generation,
table titling, row summarization) exist in the data model only; generating
them needs external corpora.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable

import numpy as np

from .hybrid import TAB_CLOSE, TAB_OPEN, serialize, wrap_in_tab_span
from .tables import Table, render_cell

_RESAMPLE_BOUND = 32


class AlignTask(str, Enum):
    COLUMN_PREDICTION = "column_prediction"
    CELL_PREDICTION = "cell_prediction"
    QUESTION_GENERATION = "question_generation"  # no generator here
    TABLE_TITLING = "table_titling"  # no generator here
    ROW_SUMMARIZATION = "row_summarization"  # no generator here


GENERATED_TASKS = (AlignTask.COLUMN_PREDICTION, AlignTask.CELL_PREDICTION)


class NoUsableCell(ValueError):
    """The table offers no cell satisfying the task's sampling precondition."""


@dataclass(frozen=True)
class AlignSample:
    task: AlignTask
    table: str
    prompt: str
    target: str
    seed: int
    template: int

    def __post_init__(self) -> None:
        if self.prompt.count(TAB_OPEN) != 1 or self.prompt.count(TAB_CLOSE) != 1:
            raise ValueError("prompt must contain exactly one <tab>...</tab> span")
        if self.prompt.index(TAB_OPEN) > self.prompt.index(TAB_CLOSE):
            raise ValueError("<tab> must precede </tab>")


def load_templates(task: AlignTask) -> list[str]:
    name = f"{task.value}.txt"
    text = resources.files("tabenc.templates").joinpath(name).read_text("utf-8")
    templates = [line for line in text.splitlines() if line.strip()]
    if len(templates) < 5:
        raise ValueError(f"need at least 5 templates for {task.value}")
    return templates


def _rendered_columns(t: Table) -> list[list[str]]:
    """Per column, the rendered non-missing values."""
    return [[render_cell(v) for v in t.column_values(j) if v is not None]
            for j in range(t.n)]


def _owning_columns(t: Table, rendered: str) -> list[int]:
    cols = []
    for j, values in enumerate(_rendered_columns(t)):
        if rendered in values:
            cols.append(j)
    return cols


def gen_column_prediction(t: Table, rng: np.random.Generator,
                          templates: list[str], seed: int = 0) -> AlignSample:
    """Sample a cell whose rendered value occurs in exactly one column and ask
    for that column. Ambiguous values are resampled up to a bound."""
    table_span = wrap_in_tab_span(serialize(t))
    for _ in range(_RESAMPLE_BOUND):
        i = int(rng.integers(0, t.m))
        j = int(rng.integers(0, t.n))
        cell = t.rows[i][j]
        if cell is None:
            continue
        value = render_cell(cell)
        if _owning_columns(t, value) != [j]:
            continue
        template = int(rng.integers(0, len(templates)))
        prompt = templates[template].format(table=table_span, value=value)
        return AlignSample(task=AlignTask.COLUMN_PREDICTION, table=t.name,
                           prompt=prompt, target=t.columns[j].name,
                           seed=seed, template=template)
    raise NoUsableCell(f"no unambiguous cell found in {t.name!r}")


def gen_cell_prediction(t: Table, rng: np.random.Generator,
                        templates: list[str], seed: int = 0) -> AlignSample:
    """Sample a column, then one of its non-missing values as the target."""
    table_span = wrap_in_tab_span(serialize(t))
    for _ in range(_RESAMPLE_BOUND):
        j = int(rng.integers(0, t.n))
        values = [render_cell(v) for v in t.column_values(j) if v is not None]
        if not values:
            continue
        value = values[int(rng.integers(0, len(values)))]
        template = int(rng.integers(0, len(templates)))
        prompt = templates[template].format(table=table_span,
                                            column=t.columns[j].name)
        return AlignSample(task=AlignTask.CELL_PREDICTION, table=t.name,
                           prompt=prompt, target=value,
                           seed=seed, template=template)
    raise NoUsableCell(f"every sampled column of {t.name!r} is fully missing")


def _outside_span(prompt: str) -> str:
    """The prompt text with the <tab>...</tab> table span removed."""
    start = prompt.index(TAB_OPEN)
    end = prompt.index(TAB_CLOSE) + len(TAB_CLOSE)
    return prompt[:start] + prompt[end:]


def sample_is_valid(sample: AlignSample, t: Table) -> bool:
    """Membership oracle: the target really belongs where the task claims.
    Only text outside the table span counts as the question."""
    question = _outside_span(sample.prompt)
    if sample.task is AlignTask.COLUMN_PREDICTION:
        names = [c.name for c in t.columns]
        if sample.target not in names:
            return False
        values = _rendered_columns(t)[names.index(sample.target)]
        return any(f'"{v}"' in question for v in values)
    if sample.task is AlignTask.CELL_PREDICTION:
        for j, col in enumerate(t.columns):
            if f'"{col.name}"' in question:
                return sample.target in _rendered_columns(t)[j]
        return False
    raise ValueError(f"no oracle for task {sample.task}")


def export_jsonl(samples: Iterable[AlignSample]) -> bytes:
    lines = []
    for s in samples:
        lines.append(json.dumps(
            {"task": s.task.value, "table": s.table, "prompt": s.prompt,
             "target": s.target, "seed": s.seed, "template": s.template},
            ensure_ascii=False))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def import_jsonl(data: bytes) -> list[AlignSample]:
    samples = []
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        samples.append(AlignSample(
            task=AlignTask(obj["task"]), table=obj["table"], prompt=obj["prompt"],
            target=obj["target"], seed=obj["seed"], template=obj["template"]))
    return samples
