"""Multi-step multi-task objective, backpropagation through the encoder chain, fit and evaluate."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, MultiModSample
from .errors import ConfigError, ContractError, NumericError
from .metrics import MetricsReport, score_task
from .model import (
    MultiModN,
    StepTag,
    batch_forward,
    forward_sequence,
    predict_dataset,
    sample_orders,
)
from .numerics import (
    AdamState,
    DropoutPlan,
    adam_step,
    clip_by_global_norm,
    mlp_backward,
    mlp_forward,
    task_loss,
)

log = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"auroc": True, "bac": True, "mse": False}


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    dropout: float = 0.1
    hidden_size: int = 32
    state_size: int = 20
    best_model_metric: tuple[str, str] | None = None
    include_step0_loss: bool = True
    randomize_encoder_order: bool = False
    supervision: str = "all"
    task_weights: dict[str, float] | None = None
    eval_timestep: int = -1
    eval_window: bool = False
    freeze_initial_state: bool = False
    state_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "hidden_size", "state_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.supervision not in ("all", "final"):
            raise ConfigError("supervision must be 'all' or 'final'")
        if self.best_model_metric is not None:
            task, metric = self.best_model_metric
            if metric not in HIGHER_IS_BETTER:
                raise ConfigError(f"best_model_metric: unknown metric {metric!r}")
            self.best_model_metric = (task, metric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_model_metric"] = list(self.best_model_metric) if self.best_model_metric else None
        return d

    @classmethod
    def from_dict(cls, doc: dict | None) -> "TrainingConfig":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config field(s): {sorted(unknown)}")
        if doc.get("best_model_metric") is not None:
            doc["best_model_metric"] = tuple(doc["best_model_metric"])
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training config: {exc}") from None


# -- per-sample objective --------------------------------------------------


@dataclass(frozen=True)
class LossEntry:
    tag: StepTag
    task: str
    value: float


def _target_at(value, timestep: int) -> float:
    if isinstance(value, np.ndarray) and value.ndim == 1:
        return float(value[timestep])
    return float(value)


def compute_sample_loss(
    model: MultiModN,
    sample: MultiModSample,
    dropout: DropoutPlan | None = None,
    *,
    include_step0: bool = True,
    supervision: str = "all",
    task_weights: dict[str, float] | None = None,
    plan: Sequence[str] | None = None,
):
    """Average decoder loss over every (state, task) pair with a valid target.

    Returns ``(total, [LossEntry, ...])``.
    """
    traj = forward_sequence(model, sample, plan, dropout)
    tags = traj.tags
    last_in_step = {}
    for i, tag in enumerate(tags):
        last_in_step[tag.timestep] = i
    entries: list[LossEntry] = []
    weights: list[float] = []
    for i, (tag, state) in enumerate(traj.entries):
        if tag.encoder is None and not include_step0:
            continue
        if supervision == "final" and last_in_step[tag.timestep] != i:
            continue
        for dec in model.decoders:
            y = _target_at(sample.targets[dec.task.name], tag.timestep)
            if np.isnan(y):
                continue
            _, caches = mlp_forward(dec.layers, state, dropout)
            value, _ = task_loss(dec.kind, caches[-1].preact, y)
            entries.append(LossEntry(tag, dec.task.name, value))
            weights.append(1.0 if task_weights is None else float(task_weights.get(dec.task.name, 1.0)))
    if not entries:
        raise ContractError(f"sample {sample.sample_id!r} has no (state, task) pair with a valid target")
    values = np.array([e.value for e in entries])
    if task_weights is None:
        total = float(np.mean(values))
    else:
        total = float(np.average(values, weights=weights))
    return total, entries


# -- batched objective and gradients ---------------------------------------


def _zero_grads(model: MultiModN) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.parameters().items()}


def compute_batch_grads(
    model: MultiModN,
    batch: Dataset,
    dropout: DropoutPlan | None = None,
    *,
    include_step0: bool = True,
    supervision: str = "all",
    task_weights: dict[str, float] | None = None,
    plan: Sequence[str] | None = None,
    order_rng: np.random.Generator | None = None,
    need_grads: bool = True,
):
    """Mean of per-sample losses over the batch and exact gradients.

    Decoder losses at every included state flow back through all upstream
    encoders that were applied, across timesteps, and into the initial state.
    Encoders skipped for a sample receive no gradient from it.
    """
    n = len(batch)
    if n == 0:
        raise ContractError("empty batch")
    T = batch.timesteps
    inputs = batch.model_inputs()
    grads = _zero_grads(model) if need_grads else None
    d = model.state_size
    total = 0.0
    weights = {dec.task.name: (1.0 if task_weights is None else float(task_weights.get(dec.task.name, 1.0))) for dec in model.decoders}
    groups = sample_orders(model, n, T, plan, batch.encoding_sequences, order_rng)

    for key, rows in groups.items():
        m = rows.size
        sub = {k: v[rows] for k, v in inputs.items()}
        targets = {k: v[rows] for k, v in batch.targets.items()}
        positions = batch_forward(model, sub, key, dropout)

        last = {}
        for p, pos in enumerate(positions):
            lt = last.setdefault(pos.timestep, np.full(m, -1))
            lt[pos.rows] = p

        # decoder pass at each position: (caches, rows, include mask, loss, grad_z)
        dec_records = []
        wsum = np.zeros(m)
        lsum = np.zeros(m)
        for p, pos in enumerate(positions):
            recs = []
            if pos.rows.size and (pos.encoder is not None or include_step0):
                if supervision == "final":
                    keep = last[pos.timestep][pos.rows] == p
                else:
                    keep = np.ones(pos.rows.size, dtype=bool)
                S_rows = pos.state[pos.rows]
                for j, dec in enumerate(model.decoders):
                    y = targets[dec.task.name]
                    y = y[pos.rows, pos.timestep] if y.ndim == 2 else y[pos.rows]
                    inc = keep & ~np.isnan(y)
                    if not inc.any():
                        continue
                    _, caches = mlp_forward(dec.layers, S_rows, dropout)
                    loss, gz = task_loss(dec.kind, caches[-1].preact, np.where(inc, y, 0.0))
                    w = weights[dec.task.name]
                    np.add.at(wsum, pos.rows[inc], w)
                    np.add.at(lsum, pos.rows[inc], w * loss[inc])
                    recs.append((j, caches, inc, gz))
            dec_records.append(recs)

        if (wsum == 0).any():
            bad = batch.sample_ids[int(rows[np.flatnonzero(wsum == 0)[0]])]
            raise ContractError(f"sample {bad!r} has no (state, task) pair with a valid target")
        total += float(np.sum(lsum / wsum))
        if not need_grads:
            continue

        coef_rows = 1.0 / (wsum * n)
        grad_S = np.zeros((m, d))
        for p in range(len(positions) - 1, -1, -1):
            pos = positions[p]
            for j, caches, inc, gz in dec_records[p]:
                dec = model.decoders[j]
                c = np.where(inc, weights[dec.task.name] * coef_rows[pos.rows], 0.0)
                g_state, layer_grads = mlp_backward(dec.layers, caches, gz * c[:, None], from_preactivation=True)
                grad_S[pos.rows] += g_state
                for li, g in enumerate(layer_grads):
                    grads[f"decoder.{dec.task.name}.{li}.weight"] += g["weight"]
                    grads[f"decoder.{dec.task.name}.{li}.bias"] += g["bias"]
            if pos.encoder is not None and pos.rows.size:
                enc = model.encoders[pos.encoder]
                g_in, layer_grads = mlp_backward(enc.layers, pos.caches, grad_S[pos.rows])
                for li, g in enumerate(layer_grads):
                    grads[f"encoder.{enc.modality}.{li}.weight"] += g["weight"]
                    grads[f"encoder.{enc.modality}.{li}.bias"] += g["bias"]
                grad_S[pos.rows] = g_in[:, :d]
        grads["state0"] += grad_S.sum(axis=0)

    return total / n, grads


# -- generic loss/predict dispatch over MultiModN and P-Fusion -------------


def _is_pfusion(model) -> bool:
    from .pfusion import PFusionModel

    return isinstance(model, PFusionModel)


def loss_and_grads(model, batch: Dataset, dropout, config: TrainingConfig, order_rng=None, need_grads=True):
    if _is_pfusion(model):
        from .pfusion import pfusion_loss_and_grads

        return pfusion_loss_and_grads(model, batch, dropout)
    return compute_batch_grads(
        model,
        batch,
        dropout,
        include_step0=config.include_step0_loss,
        supervision=config.supervision,
        task_weights=config.task_weights,
        order_rng=order_rng,
        need_grads=need_grads,
    )


def task_predictions(model, dataset: Dataset, timestep: int = -1, window: bool = False):
    """``{task: (scores, targets)}`` at the evaluation timestep (or window mean)."""
    out = {}
    T = dataset.timesteps
    if _is_pfusion(model):
        from .pfusion import pfusion_predict

        task = model.task
        if window:
            scores = np.mean([pfusion_predict(model, dataset, t) for t in range(T)], axis=0)
        else:
            scores = pfusion_predict(model, dataset)
        y = dataset.targets[task.name]
        if y.ndim == 2:
            y = np.nanmean(y, axis=1) if window else y[:, model.timestep]
        out[task.name] = (scores, _binarize_mean(task.kind, y, window))
        return out
    preds = predict_dataset(model, dataset)
    for dec in model.decoders:
        name = dec.task.name
        f = preds.final[name]
        scores = f.mean(axis=1) if window else f[:, timestep]
        y = dataset.targets[name]
        if y.ndim == 2:
            y = np.nanmean(y, axis=1) if window else y[:, timestep]
        out[name] = (scores, _binarize_mean(dec.kind, y, window))
    return out


def _binarize_mean(kind: str, y: np.ndarray, window: bool) -> np.ndarray:
    if window and kind == "binary":
        return np.where(np.isnan(y), np.nan, (y >= 0.5).astype(float))
    return y


def evaluate_scores(model, dataset: Dataset, tasks=None, timestep: int = -1, window: bool = False, threshold: float = 0.5):
    preds = task_predictions(model, dataset, timestep, window)
    kinds = {t.name: t.kind for t in model.tasks}
    return {
        name: score_task(kinds[name], s, y, threshold)
        for name, (s, y) in preds.items()
        if tasks is None or name in tasks
    }


def evaluate(model, dataset: Dataset, tasks=None, timestep: int = -1, window: bool = False, threshold: float = 0.5) -> MetricsReport:
    """Per-task AUROC + BAC (classification) or MSE (regression)."""
    scores = evaluate_scores(model, dataset, tasks, timestep, window, threshold)
    return MetricsReport.single(scores, [f"{dataset.provenance} n={len(dataset)}"])


def primary_metric(kind: str) -> str:
    return "mse" if kind == "regression" else "auroc"


def slot_metrics(model: MultiModN, dataset: Dataset, timestep: int = -1) -> list[dict[str, float | None]]:
    """Primary metric of every task at every state slot of the evaluation timestep."""
    preds = predict_dataset(model, dataset, slots=True)
    rows = []
    P = next(iter(preds.by_slot.values())).shape[2]
    for j in range(P):
        row = {}
        for dec in model.decoders:
            name = dec.task.name
            y = dataset.targets[name]
            y = y[:, timestep] if y.ndim == 2 else y
            s = preds.by_slot[name][:, timestep, j]
            row[name] = score_task(dec.kind, s, y)[primary_metric(dec.kind)]
        rows.append(row)
    return rows


# -- fit -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: dict[str, dict[str, float | None]]
    state_metrics: list[dict[str, float | None]] = field(default_factory=list)


@dataclass
class FitReport:
    epochs: list[EpochRecord]
    best_epoch: int
    best_value: float | None
    best_metric: tuple[str, str]
    config: dict
    wall_clock: float = field(default=0.0, compare=False)
    model: object = field(default=None, compare=False, repr=False)

    def curve(self, task: str, metric: str) -> list[float | None]:
        return [e.val_metrics.get(task, {}).get(metric) for e in self.epochs]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "best_epoch": self.best_epoch,
            "best_value": self.best_value,
            "best_metric": list(self.best_metric),
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def epoch_csv(self) -> str:
        cols = []
        for e in self.epochs[:1]:
            for t, ms in e.val_metrics.items():
                cols += [(t, m) for m in ms]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"] + [f"{t}_{m}" for t, m in cols])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss)] + [_cell(e.val_metrics[t][m]) for t, m in cols])
        return buf.getvalue()

    def state_csv(self) -> str:
        """Per-epoch, per-state metric log: one row per (epoch, state index)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        tasks = list(self.epochs[0].state_metrics[0]) if self.epochs and self.epochs[0].state_metrics else []
        w.writerow(["epoch", "state_index"] + tasks)
        for e in self.epochs:
            for j, row in enumerate(e.state_metrics):
                w.writerow([e.epoch, j] + [_cell(row[t]) for t in tasks])
        return buf.getvalue()


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def default_best_metric(model) -> tuple[str, str]:
    t = model.tasks[0]
    return (t.name, primary_metric(t.kind))


def _better(metric: str, new, old) -> bool:
    if new is None:
        return False
    if old is None:
        return True
    return new > old if HIGHER_IS_BETTER[metric] else new < old


def _eval_loss(model, data: Dataset, config: TrainingConfig, chunk: int = 512) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        loss, _ = loss_and_grads(model, data.subset(idx), None, config, need_grads=False)
        total += loss * idx.size
    return total / len(data)


def fit(model, train: Dataset, val: Dataset, config: TrainingConfig | None = None, *, state_log: bool = True) -> FitReport:
    """Minibatch Adam with global-norm clipping, keeping the best validation snapshot.

    ``model`` is updated in place and ends holding the best parameters.
    """
    config = config or TrainingConfig()
    if set(train.sample_ids) & set(val.sample_ids):
        raise ContractError("train and validation sets share samples")
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train and validation sets must be non-empty")
    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = model.trainable()
    adam = AdamState(learning_rate=config.learning_rate)
    task, metric = config.best_model_metric or default_best_metric(model)
    if task not in [t.name for t in model.tasks]:
        raise ConfigError(f"best_model_metric names unknown task {task!r}")
    pf = _is_pfusion(model)

    records: list[EpochRecord] = []
    best_epoch, best_value, best_snapshot = 0, None, model.snapshot()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        seen, running = 0, 0.0
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            idx = np.sort(order[start : start + config.batch_size])
            dropout = DropoutPlan(config.dropout, "train", int(rng.integers(2**62)))
            order_rng = rng if (config.randomize_encoder_order and not pf) else None
            loss, grads = loss_and_grads(model, train.subset(idx), dropout, config, order_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch} batch {b}")
            grads = clip_by_global_norm({k: grads[k] for k in params}, config.clip_norm)
            adam_step(params, grads, adam)
            running += loss * idx.size
            seen += idx.size
        val_loss = _eval_loss(model, val, config)
        val_metrics = evaluate_scores(model, val, timestep=config.eval_timestep, window=config.eval_window)
        states = slot_metrics(model, val, config.eval_timestep) if (state_log and not pf) else []
        records.append(EpochRecord(epoch, running / seen, val_loss, val_metrics, states))
        value = val_metrics.get(task, {}).get(metric)
        if _better(metric, value, best_value) or (best_value is None and epoch == 0):
            best_epoch, best_value, best_snapshot = epoch, value, model.snapshot()
        log.debug("epoch %d train %.4f val %.4f %s=%s", epoch, running / seen, val_loss, metric, value)

    model.restore(best_snapshot)
    return FitReport(
        records,
        best_epoch,
        best_value,
        (task, metric),
        config.to_dict(),
        time.perf_counter() - started,
        model,
    )
