"""Per-dataset result tables and the baseline comparison table.

All emitters are pure functions of the records passed in, so re-running
them on records loaded from disk yields byte-identical documents.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from typing import TYPE_CHECKING, Sequence

from .errors import ConfigError
from .metrics import REPORT_COLUMNS, REPORT_HEADER

if TYPE_CHECKING:
    from .experiment import RunRecord

TABLE_MODE = "threshold_micro"
BACKBONE_METHOD = {"resnet50": "ResNet-50", "efficientnetv2l": "EfficientNetV2L", "none": "Simple model"}


@dataclass(frozen=True)
class BaselineRow:
    source: str
    dataset: str
    method: str
    acc: str  # as printed, so "0.7940" keeps its trailing zero


def baseline_rows() -> list[BaselineRow]:
    text = resources.files("dermabench").joinpath("baselines.json").read_text(encoding="utf-8")
    return [BaselineRow(**row) for row in json.loads(text)]


def fmt4(x: float) -> str:
    return f"{x:.4f}"


def _dataset_of(records: Sequence["RunRecord"]) -> tuple[str, int]:
    names = {r.spec.dataset.name for r in records}
    if len(names) != 1:
        raise ConfigError(f"a results table covers one dataset, got {sorted(names)}")
    d = records[0].spec.dataset
    return d.name, d.resolution


def _best_rows(values: list[list[float]]) -> list[set[int]]:
    best = []
    for col in range(len(REPORT_COLUMNS)):
        column = [round(v[col], 4) for v in values]
        target = min(column) if col == 0 else max(column)  # lower loss is better
        best.append({i for i, v in enumerate(column) if v == target})
    return best


def emit_results_table(records: Sequence["RunRecord"], format: str = "text", mode: str = TABLE_MODE) -> str:
    """Rows are models, columns Loss, ACC, Precision, AUC, Recall at 4 decimals.

    The best value of each column is starred in text output; CSV output
    appends a ``best`` row naming the winning model(s) per column.
    """
    if not records:
        raise ConfigError("no records to tabulate")
    name, side = _dataset_of(records)
    models = [r.spec.model for r in records]
    values = [list(r.reports[mode].row()) for r in records]
    best = _best_rows(values)

    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *REPORT_COLUMNS])
        for m, row in zip(models, values):
            w.writerow([m, *map(fmt4, row)])
        w.writerow(["best", *("|".join(models[i] for i in sorted(b)) for b in best)])
        return buf.getvalue()
    if format != "text":
        raise ConfigError(f"unknown table format {format!r}")

    cells = [[fmt4(v) + ("*" if i in best[c] else "") for c, v in enumerate(row)] for i, row in enumerate(values)]
    first = max(len(m) for m in models)
    widths = [max(len(h), *(len(r[c]) for r in cells)) for c, h in enumerate(REPORT_HEADER)]
    lines = [f"Results - {name} {side}x{side}x3"]
    lines.append(" ".join([" " * first, *(h.ljust(w) for h, w in zip(REPORT_HEADER, widths))]).rstrip())
    for m, row in zip(models, cells):
        lines.append(" ".join([m.ljust(first), *(c.ljust(w) for c, w in zip(row, widths))]).rstrip())
    lines.append(f"* best value per column ({mode})")
    return "\n".join(lines) + "\n"


def emit_comparison(records: "RunRecord | Sequence[RunRecord]", format: str = "text") -> str:
    """Bundled baselines followed by this work's row(s); accuracy only."""
    if not isinstance(records, (list, tuple)):
        records = [records]
    rows = [(b.source, b.dataset, b.method, b.acc) for b in baseline_rows()]
    for r in records:
        method = BACKBONE_METHOD.get(r.spec.model_config().backbone.kind, r.spec.model)
        rows.append(("This work", r.spec.dataset.name, method, fmt4(r.reports[TABLE_MODE].accuracy)))
    header = ("Source", "Dataset", "Method", "ACC")

    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([h.lower() for h in header])
        w.writerows(rows)
        return buf.getvalue()
    if format != "text":
        raise ConfigError(f"unknown table format {format!r}")
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["Comparison with published results"]
    lines.append(" ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines += [" ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
