"""AUROC, balanced accuracy, MSE and normal-approximation confidence intervals."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError

Z95 = 1.96


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    mean_rank = ends - (counts - 1) / 2.0
    return mean_rank[inverse]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(probabilities, labels) -> float:
    """One-vs-rest AUROC averaged over classes present in ``labels``."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    vals = []
    for c in range(p.shape[1]):
        hit = y == c
        if hit.all() or not hit.any():
            continue
        vals.append(auroc(p[:, c], hit.astype(int)))
    if not vals:
        raise UndefinedMetricError("macro AUROC needs at least two classes")
    return float(np.mean(vals))


def balanced_accuracy(predictions, labels) -> float:
    """Mean per-class recall; for binary inputs (sensitivity + specificity) / 2."""
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ContractError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    classes = np.unique(y)
    if classes.size < 2:
        raise UndefinedMetricError("balanced accuracy needs at least two classes")
    return float(np.mean([np.mean(p[y == c] == c) for c in classes]))


def mse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ContractError(f"predictions ({p.size}) and targets ({t.size}) differ in length")
    if p.size == 0:
        raise ContractError("mse of empty vectors")
    return float(np.mean((p - t) ** 2))


def ci95(values) -> tuple[float, float, float]:
    """``(mean, low, high)`` with half-width 1.96 * sd / sqrt(n), sd using n - 1."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ContractError("a confidence interval needs at least two values")
    mean = float(v.mean())
    if np.all(v == v[0]):
        return float(v[0]), float(v[0]), float(v[0])
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean, mean - half, mean + half


def macro_over_tasks(values) -> float:
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    if not vals:
        raise ContractError("no task values to average")
    return float(np.mean(vals))


def score_task(kind: str, predictions, targets, threshold: float = 0.5) -> dict[str, float | None]:
    """Metrics for one task. Undefined metrics are reported as ``None``."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    valid = ~np.isnan(y)
    p, y = p[valid], y[valid]
    if kind == "regression":
        return {"mse": mse(p, y) if y.size else None}
    out: dict[str, float | None] = {}
    try:
        if kind == "binary":
            out["auroc"] = auroc(p, y)
        else:
            out["auroc"] = macro_auroc(p, y)
    except UndefinedMetricError:
        out["auroc"] = None
    hard = (p >= threshold).astype(float) if kind == "binary" else np.argmax(p, axis=1).astype(float)
    try:
        out["bac"] = balanced_accuracy(hard, y)
    except UndefinedMetricError:
        out["bac"] = None
    return out


@dataclass
class MetricValue:
    estimate: float
    ci_low: float | None = None
    ci_high: float | None = None
    values: list[float] = field(default_factory=list)

    @property
    def half_width(self) -> float | None:
        if self.ci_low is None:
            return None
        return (self.ci_high - self.ci_low) / 2.0

    def overlaps(self, other: "MetricValue") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "ci_low": self.ci_low, "ci_high": self.ci_high, "values": list(self.values)}


@dataclass
class MetricsReport:
    """``tasks[task][metric]`` -> :class:`MetricValue` (or ``None`` if undefined)."""

    tasks: dict[str, dict[str, MetricValue | None]]
    provenance: list[str] = field(default_factory=list)

    @classmethod
    def single(cls, scores: Mapping[str, Mapping[str, float | None]], provenance=()) -> "MetricsReport":
        tasks = {
            t: {m: (None if v is None else MetricValue(v, values=[v])) for m, v in ms.items()}
            for t, ms in scores.items()
        }
        return cls(tasks, list(provenance))

    @classmethod
    def aggregate(cls, runs: Sequence[Mapping[str, Mapping[str, float | None]]], provenance=()) -> "MetricsReport":
        """Pool per-run scores (folds and/or seeds) into estimates with 95% CIs."""
        tasks: dict[str, dict[str, MetricValue | None]] = {}
        for run in runs:
            for t, ms in run.items():
                for m in ms:
                    tasks.setdefault(t, {}).setdefault(m, None)
        for t, ms in tasks.items():
            for m in ms:
                vals = [run[t][m] for run in runs if run.get(t, {}).get(m) is not None]
                if not vals:
                    continue
                if len(vals) >= 2:
                    est, lo, hi = ci95(vals)
                    ms[m] = MetricValue(est, lo, hi, [float(v) for v in vals])
                else:
                    ms[m] = MetricValue(float(vals[0]), values=[float(vals[0])])
        return cls(tasks, list(provenance))

    def get(self, task: str, metric: str) -> MetricValue | None:
        return self.tasks.get(task, {}).get(metric)

    def to_dict(self) -> dict:
        return {
            "tasks": {t: {m: (v.to_dict() if v else None) for m, v in ms.items()} for t, ms in self.tasks.items()},
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Task columns, metric rows, cells ``estimate ± half-width``."""
        tasks = list(self.tasks)
        metrics: list[str] = []
        for ms in self.tasks.values():
            for m in ms:
                if m not in metrics:
                    metrics.append(m)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric"] + tasks)
        for m in metrics:
            row = [m]
            for t in tasks:
                v = self.tasks[t].get(m)
                if v is None:
                    row.append("")
                elif v.half_width is None:
                    row.append(f"{v.estimate:.4f}")
                else:
                    row.append(f"{v.estimate:.4f} ± {v.half_width:.4f}")
            w.writerow(row)
        return buf.getvalue()
