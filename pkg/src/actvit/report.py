"""Result tables, learning curves and the inference latency benchmark."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

MISSING = "—"
PROPOSED = "ACT-ViT"
# variants of the proposed family that do not count as prior baselines
NON_BASELINES = ("ACT-ViT", "ACT-ViT(s)", "ACT-MLP", "ACT-MLP(s)")


def _column(rec: Mapping) -> str:
    return f"{rec['llm_id']}/{rec['dataset_id']}"


@dataclass
class ResultsTable:
    """AUC results grouped by method (rows) and llm/dataset (columns).

    ``cells`` maps ``method -> column -> [mean, std]`` on the 0..1 scale; std
    is ``None`` for single-run cells.
    """

    methods: list[str]
    columns: list[str]
    cells: dict[str, dict[str, list]]
    proposed: str = PROPOSED
    non_baselines: tuple[str, ...] = NON_BASELINES
    show_std: bool = False

    def value(self, method: str, column: str) -> float | None:
        cell = self.cells.get(method, {}).get(column)
        return None if cell is None else cell[0]

    def ranking(self, column: str) -> list[str]:
        """Methods with a value in ``column``, best first (ties keep row order)."""
        have = [m for m in self.methods if self.value(m, column) is not None]
        return sorted(have, key=lambda m: -self.value(m, column))

    def improvement(self, column: str) -> float | None:
        """Proposed method minus the best prior baseline, in AUC points (x100)."""
        ours = self.value(self.proposed, column)
        prior = [self.value(m, column) for m in self.methods
                 if m not in self.non_baselines and self.value(m, column) is not None]
        if ours is None or not prior:
            return None
        return 100.0 * ours - 100.0 * max(prior)

    def _fmt(self, method: str, column: str) -> str:
        cell = self.cells.get(method, {}).get(column)
        if cell is None:
            return MISSING
        text = f"{100 * cell[0]:.2f}"
        if self.show_std and cell[1] is not None:
            text += f"±{100 * cell[1]:.2f}"
        # ties share the mark: every method at the top value is bold, every
        # method at the next distinct value is underlined
        levels = sorted({self.value(m, column) for m in self.ranking(column)}, reverse=True)
        if cell[0] == levels[0]:
            return f"**{text}**"
        if len(levels) > 1 and cell[0] == levels[1]:
            return f"_{text}_"
        return text

    def rows(self) -> list[list[str]]:
        out = [["Method", *self.columns]]
        out += [[m, *(self._fmt(m, c) for c in self.columns)] for m in self.methods]
        if self.proposed in self.methods:
            imp = [self.improvement(c) for c in self.columns]
            out.append(["Improvement", *(MISSING if v is None else f"{v:+.2f}" for v in imp)])
        return out

    def render(self) -> str:
        """Plain-text table; best value in **bold**, second best _underlined_."""
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"methods": self.methods, "columns": self.columns, "cells": self.cells,
                "proposed": self.proposed, "non_baselines": list(self.non_baselines), "show_std": self.show_std}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ResultsTable":
        payload = dict(payload)
        payload["non_baselines"] = tuple(payload.get("non_baselines", NON_BASELINES))
        return cls(**payload)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)


def results_table(records: Iterable[Mapping], *, show_std: bool = False, proposed: str = PROPOSED,
                  non_baselines: Sequence[str] = NON_BASELINES) -> ResultsTable:
    """Group run records ``{method, llm_id, dataset_id, auc}`` into a table.

    Several records for the same cell (e.g. seeds) are averaged; the sample
    standard deviation is kept for the mean±std display.
    """
    grouped: dict[str, dict[str, list[float]]] = {}
    methods, columns = [], []
    for rec in records:
        m, c = rec["method"], _column(rec)
        if m not in methods:
            methods.append(m)
        if c not in columns:
            columns.append(c)
        grouped.setdefault(m, {}).setdefault(c, []).append(float(rec["auc"]))
    cells = {m: {c: [float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else None]
                 for c, v in cols.items()} for m, cols in grouped.items()}
    return ResultsTable(methods, columns, cells, proposed, tuple(non_baselines), show_std)


@dataclass
class LearningCurve:
    fractions: list[float]
    series: dict[str, list[float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"fractions": self.fractions, "series": self.series}


def learning_curve(fractions: Sequence[float], series: Mapping[str, Sequence[float | None]],
                   svg_path=None, json_path=None, title: str | None = None) -> LearningCurve:
    """Test AUC against the fraction of target training data, one line per method."""
    fractions = [float(f) for f in fractions]
    if len(fractions) < 2:
        raise ValueError("a learning curve needs at least two data fractions")
    for name, ys in series.items():
        if len(ys) != len(fractions):
            raise ValueError(f"series {name!r} has {len(ys)} points for {len(fractions)} fractions")
    curve = LearningCurve(fractions, {k: [None if v is None else float(v) for v in ys] for k, ys in series.items()})
    if svg_path is not None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [100 * f for f in fractions]
        for name, ys in curve.series.items():
            pts = [(x, 100 * y) for x, y in zip(xs, ys) if y is not None]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels([f"{x:g}%" for x in xs])
        ax.minorticks_off()
        ax.set_xlabel("fraction of target training data")
        ax.set_ylabel("test AUC")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(svg_path, format="svg")
        plt.close(fig)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(curve.to_dict(), indent=2, sort_keys=True))
    return curve


def latency_bench(model: torch.nn.Module, x: np.ndarray, llm_id: str, repetitions: int = 20,
                  warmup: int = 3) -> dict:
    """Amortized per-instance latency of a batched eval-mode forward on one thread."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = torch.as_tensor(np.asarray(x), dtype=dtype)
    n = batch.shape[0]
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.inference_mode():
            for _ in range(warmup):
                model(batch, llm_id)
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                model(batch, llm_id)
                times.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(threads)
    per = np.asarray(times) / n
    return {"batch_size": int(n), "repetitions": repetitions, "warmup": warmup,
            "median_s": float(np.median(per)), "p95_s": float(np.percentile(per, 95)),
            "mean_batch_s": float(statistics.fmean(times))}
