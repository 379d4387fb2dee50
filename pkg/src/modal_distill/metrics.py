"""Accuracy, ranked average precision, mean AP and metric files.

CSV layout (header fixed)::

    class,support,ap
    <class name>,<positives>,<ap>          one row per class, in class order
    __mean_ap__,<total positives>,<mean>   summary row
    __accuracy__,<num samples>,<acc>       present when accuracy is known

A report with no classes is written as the header line only. Classes with
zero positives keep their row with an empty ``ap`` cell and are excluded
from the mean.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CSV_HEADER = ("class", "support", "ap")
MEAN_ROW = "__mean_ap__"
ACC_ROW = "__accuracy__"


class MetricError(ValueError):
    pass


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise MetricError(f"{p.size} predictions but {y.size} labels")
    if p.size == 0:
        raise MetricError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


def average_precision(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Mean over positives of precision at each positive's rank.

    Ranks sort by descending score; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and positives {pos.shape} must be equal-length vectors")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class MetricReport:
    per_class_ap: dict[str, float]
    mean_ap: float
    counts: dict[str, int]
    accuracy: float | None = None
    excluded: list[str] = field(default_factory=list)
    num_samples: int | None = None


def mean_ap(
    per_class_scores: Mapping[str, Sequence[float]] | Sequence[Sequence[float]],
    per_class_positives: Mapping[str, Sequence[bool]] | Sequence[Sequence[bool]],
    accuracy_value: float | None = None,
) -> MetricReport:
    """Unweighted mean of per-class AP over classes that have positives."""
    if not isinstance(per_class_scores, Mapping):
        per_class_scores = {str(i): v for i, v in enumerate(per_class_scores)}
    if not isinstance(per_class_positives, Mapping):
        per_class_positives = {str(i): v for i, v in enumerate(per_class_positives)}
    if list(per_class_scores) != list(per_class_positives):
        raise MetricError("scores and positives name different classes")
    aps: dict[str, float] = {}
    counts: dict[str, int] = {}
    excluded: list[str] = []
    for name in per_class_scores:
        pos = np.asarray(per_class_positives[name], dtype=bool)
        if len(pos) != len(per_class_scores[name]):
            raise MetricError(f"class {name!r}: scores and positives differ in length")
        counts[name] = int(pos.sum())
        if counts[name] == 0:
            excluded.append(name)
            continue
        aps[name] = average_precision(per_class_scores[name], pos)
    if not aps:
        raise MetricError("no class has any positive sample")
    return MetricReport(aps, float(np.mean(list(aps.values()))), counts, accuracy_value, excluded)


def classification_report(logits: np.ndarray, labels: Sequence[int], class_names: Sequence[str]) -> MetricReport:
    """Accuracy plus one-vs-rest ranked AP of every class column."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    scores = {name: logits[:, c] for c, name in enumerate(class_names)}
    positives = {name: y == c for c, name in enumerate(class_names)}
    report = mean_ap(scores, positives, accuracy(np.argmax(logits, axis=1), y))
    report.num_samples = int(len(y))
    return report


def _f6(x: float) -> str:
    return f"{x:.6f}"


def _json_text(report: MetricReport) -> str:
    # hand-rolled so every float prints with exactly six decimals
    lines = ["{"]
    acc = "null" if report.accuracy is None else _f6(report.accuracy)
    lines.append(f'  "accuracy": {acc},')
    lines.append(f'  "excluded": {json.dumps(list(report.excluded))},')
    lines.append(f'  "mean_ap": {_f6(report.mean_ap)},')
    ns = "null" if report.num_samples is None else str(int(report.num_samples))
    lines.append(f'  "num_samples": {ns},')
    rows = []
    for name, support in report.counts.items():
        ap = report.per_class_ap.get(name)
        ap_s = "null" if ap is None else _f6(ap)
        rows.append(f'    {{"ap": {ap_s}, "class": {json.dumps(name)}, "support": {int(support)}}}')
    if rows:
        lines.append('  "per_class": [')
        lines.append(",\n".join(rows))
        lines.append("  ]")
    else:
        lines.append('  "per_class": []')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _csv_text(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    if report.counts:
        for name, support in report.counts.items():
            ap = report.per_class_ap.get(name)
            w.writerow([name, int(support), "" if ap is None else _f6(ap)])
        w.writerow([MEAN_ROW, sum(report.counts.values()), _f6(report.mean_ap)])
        if report.accuracy is not None:
            w.writerow([ACC_ROW, report.num_samples if report.num_samples is not None else "", _f6(report.accuracy)])
    return buf.getvalue()


def export_metrics(report: MetricReport, path: str | os.PathLike, format: str = "json") -> Path:
    path = Path(path)
    if format == "json":
        path.write_text(_json_text(report), encoding="utf-8")
    elif format == "csv":
        path.write_text(_csv_text(report), encoding="utf-8")
    else:
        raise ValueError(f"unknown metrics format {format!r}")
    return path


def load_metrics(path: str | os.PathLike) -> MetricReport:
    """Parse a file written by :func:`export_metrics` (format from suffix)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != CSV_HEADER:
            raise MetricError(f"{path}: unexpected CSV header {rows[0]}")
        aps, counts = {}, {}
        mean, acc, n = math.nan, None, None
        for name, support, ap in rows[1:]:
            if name == MEAN_ROW:
                mean = float(ap)
            elif name == ACC_ROW:
                acc = float(ap)
                n = int(support) if support else None
            else:
                counts[name] = int(support)
                if ap:
                    aps[name] = float(ap)
        excluded = [k for k in counts if k not in aps]
        return MetricReport(aps, mean, counts, acc, excluded, n)
    obj = json.loads(text)
    aps = {r["class"]: r["ap"] for r in obj["per_class"] if r["ap"] is not None}
    counts = {r["class"]: r["support"] for r in obj["per_class"]}
    return MetricReport(aps, obj["mean_ap"], counts, obj["accuracy"], obj["excluded"], obj["num_samples"])
