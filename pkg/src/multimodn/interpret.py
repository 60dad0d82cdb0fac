"""Per-modality importance scores and cumulative per-step predictions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, MultiModSample
from .errors import ContractError, FormatError
from .model import MultiModN, forward_sequence, predict_trajectory
from .numerics import mlp_forward

AGGREGATIONS = ("mean-signed", "mean-absolute")


def _positive(dec_kind: str, out: np.ndarray) -> np.ndarray:
    """Score used for importance: class-1 probability or the raw regression value."""
    if dec_kind == "multiclass":
        return out[..., 1]
    return out[..., 0]


@dataclass
class ImportanceMatrix:
    """``scores[i, j]``: importance of modality ``i`` for task ``j`` (NaN if absent)."""

    modalities: list[str]
    tasks: list[str]
    scores: np.ndarray
    aggregation: str
    population: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.scores.shape != (len(self.modalities), len(self.tasks)):
            raise ContractError(
                f"score grid {self.scores.shape} does not match {len(self.modalities)} x {len(self.tasks)}"
            )

    def get(self, modality: str, task: str) -> float:
        return float(self.scores[self.modalities.index(modality), self.tasks.index(task)])

    def absent(self) -> list[str]:
        return [m for i, m in enumerate(self.modalities) if np.isnan(self.scores[i]).all()]


@dataclass
class CumulativeGrid:
    """Predictions after each encoded modality of one sample; row 0 is the prior."""

    sample_id: str
    steps: list[str]
    tasks: list[str]
    values: np.ndarray

    def __len__(self):
        return len(self.steps)


def importance_scores(model: MultiModN, dataset: Dataset, aggregation: str = "mean-signed", timestep: int = 0) -> ImportanceMatrix:
    """Each encoder applied alone to the initial state, minus the prior prediction.

    Only samples with the modality present at ``timestep`` enter its row.
    """
    if aggregation not in AGGREGATIONS:
        raise ContractError(f"unknown aggregation {aggregation!r}; choose from {AGGREGATIONS}")
    inputs = dataset.model_inputs()
    s0 = model.initial_state[None, :]
    prior = [_positive(d.kind, mlp_forward(d.layers, s0)[0])[0] for d in model.decoders]
    scores = np.full((len(model.encoders), len(model.decoders)), np.nan)
    population = {}
    for i, enc in enumerate(model.encoders):
        x = inputs[enc.modality][:, timestep, :]
        rows = np.flatnonzero(~np.isnan(x).any(axis=1))
        population[enc.modality] = [dataset.sample_ids[r] for r in rows]
        if rows.size == 0:
            continue
        S = np.broadcast_to(model.initial_state, (rows.size, model.state_size))
        state, _ = mlp_forward(enc.layers, np.concatenate([S, x[rows]], axis=1))
        for j, dec in enumerate(model.decoders):
            delta = _positive(dec.kind, mlp_forward(dec.layers, state)[0]) - prior[j]
            scores[i, j] = np.mean(delta) if aggregation == "mean-signed" else np.mean(np.abs(delta))
    return ImportanceMatrix(model.modality_names, model.task_names, scores, aggregation, population)


def cumulative_predictions(model: MultiModN, sample: MultiModSample, plan=None) -> CumulativeGrid:
    """Decoder outputs at the prior and after every encoded (non-skipped) modality."""
    traj = forward_sequence(model, sample, plan)
    grid = predict_trajectory(model, traj)
    keep = [i for i, tag in enumerate(grid.tags) if tag.encoder is not None or tag.timestep == 0]
    values = grid.positive_scores()[keep]
    steps = [grid.tags[i].label for i in keep]
    return CumulativeGrid(sample.sample_id, steps, model.task_names, values)


def export_heatmap(product, destination) -> Path:
    """Write an importance matrix or cumulative grid as a labelled CSV."""
    if isinstance(product, ImportanceMatrix):
        axis, labels, values = "modality", product.modalities, product.scores
    elif isinstance(product, CumulativeGrid):
        axis, labels, values = "step", product.steps, product.values
    else:
        raise ContractError(f"cannot export {type(product).__name__}")
    path = Path(destination)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis] + list(product.tasks))
        for label, row in zip(labels, values):
            w.writerow([label] + ["" if np.isnan(v) else repr(float(v)) for v in row])
    return path


def read_heatmap(path):
    """Parse an exported heatmap: ``(axis, row_labels, tasks, values)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty heatmap file")
    header, body = rows[0], rows[1:]
    labels, values = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
        labels.append(row[0])
        values.append([float(c) if c else np.nan for c in row[1:]])
    return header[0], labels, header[1:], np.asarray(values, dtype=np.float64).reshape(len(body), len(header) - 1)
