"""CSV tables and matplotlib figures for command and recipe outputs."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_table(rows: Sequence[Mapping[str, Any]], path: str | os.PathLike, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})
    return path


def _cell(v: Any) -> Any:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_json(obj: Any, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


class JsonlLog:
    """Append-only JSON-lines log whose ``step`` field must strictly increase."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._fh = self.path.open("w", encoding="utf-8")
        self._last: int | None = None

    def write(self, step: int, **fields: Any) -> None:
        if self._last is not None and step <= self._last:
            raise ValueError(f"log steps must increase: {step} after {self._last}")
        self._last = step
        self._fh.write(json.dumps({"step": int(step), **fields}, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path: str | os.PathLike) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def plot_loss_curve(steps: Sequence[int], losses: Sequence[float], path: str | os.PathLike, title: str = "transfer loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=1)
    if min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_bars(labels: Sequence[str], values: Sequence[float], path: str | os.PathLike, ylabel: str = "accuracy", title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(labels)), 3.4))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sweep(points: Sequence[str], accuracies: Iterable[float | None], path: str | os.PathLike) -> Path:
    """Downstream accuracy per transfer point, in network order; skipped points are gaps."""
    acc = [float("nan") if a is None else a for a in accuracies]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(points)), acc, marker="o")
    ax.set_xticks(range(len(points)))
    ax.set_xticklabels(points)
    ax.set_xlabel("transfer point")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
