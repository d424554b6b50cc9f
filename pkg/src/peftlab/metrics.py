"""Metrics, multi-seed aggregation, and table emission.

The note metric is a unigram-F1 overlap proxy on a 0-100 scale; the report
column is labelled "NoteScore(F1-proxy)" to make the substitution explicit.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass

from .data import UNPARSEABLE, tokenize_text
from .tensor import UsageError

COLUMNS = ("Method", "Config", "Params(%)", "Sepsis Acc", "Mortality Acc",
           "NoteScore(F1-proxy)", "Avg")


@dataclass
class MetricResult:
    mean: float
    std: float
    n_seeds: int
    metric_name: str = ""


@dataclass
class RunRow:
    method: str
    config_label: str
    trainable_pct: float
    sepsis_acc: MetricResult
    mortality_acc: MetricResult
    note_score: MetricResult

    @property
    def avg(self) -> float:
        return avg_column(self.sepsis_acc.mean, self.mortality_acc.mean, self.note_score.mean)


def accuracy(predictions: list, gold: list) -> float:
    if len(predictions) != len(gold) or not gold:
        raise UsageError("predictions and gold must be non-empty and equal-length")
    hits = sum(1 for p, g in zip(predictions, gold) if p != UNPARSEABLE and p == g)
    return hits / len(gold)


def note_overlap_score(generated: str, reference: str) -> float:
    """100 x unigram F1 between token multisets."""
    ref_tokens = Counter(tokenize_text(reference))
    if not ref_tokens:
        raise UsageError("reference must be non-empty")
    gen_tokens = Counter(tokenize_text(generated))
    overlap = sum((gen_tokens & ref_tokens).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(gen_tokens.values())
    recall = overlap / sum(ref_tokens.values())
    return 100.0 * 2 * precision * recall / (precision + recall)


def aggregate(values: list[float], metric_name: str = "") -> MetricResult:
    if not values:
        raise UsageError("aggregate requires at least one value")
    n = len(values)
    mean = sum(values) / n
    std = 0.0 if n == 1 else math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
    return MetricResult(mean, std, n, metric_name)


def avg_column(sepsis: float, mortality: float, note: float) -> float:
    return round((sepsis + mortality + note) / 3.0, 1)


def _cell(m: MetricResult) -> str:
    return f"{m.mean:.1f} ±{m.std:.1f}"


def emit_report(rows: list[RunRow], format: str = "markdown") -> str:
    if format not in ("markdown", "csv"):
        raise UsageError(f"unknown report format {format!r}")
    metric_of = {3: lambda r: r.sepsis_acc.mean, 4: lambda r: r.mortality_acc.mean,
                 5: lambda r: r.note_score.mean, 6: lambda r: r.avg}
    best = {col: max(fn(r) for r in rows) if rows else None for col, fn in metric_of.items()}

    table = []
    for r in rows:
        cells = [r.method, r.config_label, f"{r.trainable_pct:.1f}%",
                 _cell(r.sepsis_acc), _cell(r.mortality_acc), _cell(r.note_score), f"{r.avg:.1f}"]
        if format == "markdown":
            for col, fn in metric_of.items():
                if rows and fn(r) == best[col]:
                    cells[col] = f"**{cells[col]}**"
        table.append(cells)

    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(COLUMNS)
        w.writerows(table)
        return buf.getvalue()

    lines = ["| " + " | ".join(COLUMNS) + " |",
             "| " + " | ".join("---" for _ in COLUMNS) + " |"]
    lines += ["| " + " | ".join(cells) + " |" for cells in table]
    return "\n".join(lines) + "\n"
