"""Parallel-fusion baseline.

Per-modality vectors are concatenated in a fixed order, a missing modality is
replaced by a zero pad, and a single-task MLP predicts from the result. For
time series the baseline sees one timestep (``model.timestep``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ModalitySpec, MultiModSample, TaskSpec
from .errors import ContractError, FormatError, ShapeError
from .model import FORMAT_VERSION, HEADS, is_missing, read_weights
from .numerics import DenseLayer, DropoutPlan, glorot_layer, mlp_backward, mlp_forward, task_loss


@dataclass
class PFusionModel:
    modalities: list[ModalitySpec]
    task: TaskSpec
    layers: list[DenseLayer]
    seed: int | None = None
    timestep: int = -1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.layers[0].in_dim != self.input_dim:
            raise ShapeError(
                f"decoder input dim {self.layers[0].in_dim} != sum of modality dims {self.input_dim}"
            )
        if self.layers[-1].out_dim != self.task.output_dim:
            raise ShapeError(f"prediction layer has {self.layers[-1].out_dim} outputs, task needs {self.task.output_dim}")

    @property
    def input_dim(self) -> int:
        return sum(m.dim for m in self.modalities)

    @property
    def task_names(self) -> list[str]:
        return [self.task.name]

    @property
    def tasks(self) -> list[TaskSpec]:
        return [self.task]

    @property
    def hidden_size(self) -> int:
        return self.layers[0].out_dim

    def spans(self) -> list[tuple[str, int, int]]:
        out, col = [], 0
        for m in self.modalities:
            out.append((m.name, col, col + m.dim))
            col += m.dim
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        p = {}
        for j, layer in enumerate(self.layers):
            p[f"decoder.{j}.weight"] = layer.weights
            p[f"decoder.{j}.bias"] = layer.bias
        return p

    trainable = parameters

    def snapshot(self):
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore(self, snapshot):
        for k, v in self.parameters().items():
            v[...] = snapshot[k]


def init_pfusion(modalities, task: TaskSpec, hidden_size: int = 32, seed: int = 0, timestep: int = -1) -> PFusionModel:
    mods = [ModalitySpec(m.name, m.dim) for m in modalities]
    if not mods:
        raise ContractError("P-Fusion needs at least one modality")
    rng = np.random.default_rng(seed)
    d_in = sum(m.dim for m in mods)
    layers = [
        glorot_layer(rng, d_in, hidden_size, "relu"),
        glorot_layer(rng, hidden_size, hidden_size, "relu"),
        glorot_layer(rng, hidden_size, task.output_dim, HEADS[task.kind]),
    ]
    task = TaskSpec(task.name, task.kind, task.n_classes, per_timestep=task.per_timestep)
    return PFusionModel(mods, task, layers, seed, timestep)


def concat_inputs(model: PFusionModel, inputs: dict[str, np.ndarray], timestep: int | None = None) -> np.ndarray:
    """``(n, sum dims)`` concatenation at one timestep; missing spans are zero."""
    t = model.timestep if timestep is None else timestep
    parts = []
    for m in model.modalities:
        x = inputs[m.name][:, t, :]
        if x.shape[1] != m.dim:
            raise ShapeError(f"modality {m.name!r} has dim {x.shape[1]}, model expects {m.dim}")
        missing = np.isnan(x).any(axis=1)
        parts.append(np.where(missing[:, None], 0.0, x))
    return np.concatenate(parts, axis=1)


def pfusion_forward(model: PFusionModel, sample: MultiModSample, timestep: int | None = None):
    t = model.timestep if timestep is None else timestep
    step = sample.data[t]
    parts = []
    for m in model.modalities:
        x = step.get(m.name)
        if is_missing(x):
            parts.append(np.zeros(m.dim))
            continue
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (m.dim,):
            raise ShapeError(f"modality {m.name!r} has shape {x.shape}, model expects ({m.dim},)")
        parts.append(x)
    out, _ = mlp_forward(model.layers, np.concatenate(parts))
    return out if model.task.kind == "multiclass" else float(out[0])


def pfusion_predict(model: PFusionModel, dataset: Dataset, timestep: int | None = None) -> np.ndarray:
    out, _ = mlp_forward(model.layers, concat_inputs(model, dataset.model_inputs(), timestep))
    return out if model.task.kind == "multiclass" else out[:, 0]


def _targets_at(model: PFusionModel, dataset: Dataset) -> np.ndarray:
    y = dataset.targets[model.task.name]
    return y[:, model.timestep] if y.ndim == 2 else y


def pfusion_loss_and_grads(model: PFusionModel, batch: Dataset, dropout: DropoutPlan | None = None):
    """Mean task loss over the batch and its exact parameter gradients."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    y = _targets_at(model, batch)
    valid = ~np.isnan(y)
    if not valid.any():
        raise ContractError("no sample in the batch has a valid target")
    x = concat_inputs(model, batch.model_inputs())
    _, caches = mlp_forward(model.layers, x, dropout)
    z = caches[-1].preact
    losses, grad_z = task_loss(model.task.kind, z, np.where(valid, y, 0.0))
    n_valid = valid.sum()
    loss = float(losses[valid].sum() / n_valid)
    grad_z = grad_z * (valid / n_valid).reshape((-1,) + (1,) * (grad_z.ndim - 1))
    _, layer_grads = mlp_backward(model.layers, caches, grad_z, from_preactivation=True)
    grads = {}
    for j, g in enumerate(layer_grads):
        grads[f"decoder.{j}.weight"] = g["weight"]
        grads[f"decoder.{j}.bias"] = g["bias"]
    return loss, grads


def pfusion_to_dict(model: PFusionModel) -> dict:
    weights = []
    for j, layer in enumerate(model.layers):
        weights.append({"name": f"decoder.{j}.weight", "shape": list(layer.weights.shape), "values": layer.weights.reshape(-1).tolist()})
        weights.append({"name": f"decoder.{j}.bias", "shape": list(layer.bias.shape), "values": layer.bias.tolist()})
    return {
        "format_version": FORMAT_VERSION,
        "type": "pfusion",
        "hidden_size": model.hidden_size,
        "seed": model.seed,
        "timestep": model.timestep,
        "modalities": [{"name": m.name, "dim": m.dim} for m in model.modalities],
        "task": model.task.to_dict(),
        "metadata": model.metadata,
        "weights": weights,
    }


def pfusion_from_dict(doc: dict) -> PFusionModel:
    try:
        t = doc["task"]
        task = TaskSpec(t["name"], t["kind"], t.get("classes"), per_timestep=t.get("per_timestep", False))
        mods = [ModalitySpec(m["name"], int(m["dim"])) for m in doc["modalities"]]
        model = init_pfusion(mods, task, int(doc["hidden_size"]), 0, int(doc.get("timestep", -1)))
    except (KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"malformed P-Fusion header: {exc}") from None
    model.restore(read_weights(doc, [(k, v.shape) for k, v in model.parameters().items()]))
    model.seed = doc.get("seed")
    model.metadata = dict(doc.get("metadata") or {})
    return model
