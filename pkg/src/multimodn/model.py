"""Sequential modular multimodal network.

A trainable initial state is updated in sequence by modality-specific
encoders, each mapping ``concat(state, x_modality)`` to a new state of the
same size. Missing modalities are skipped: the state passes through
unchanged and the encoder is not used. Task-specific decoders read any state.

Two execution paths exist. The single-sample path (:func:`forward_sequence`,
:func:`predict_trajectory`) mirrors the definitions directly and backs the
interpretability tools. The batched path (:func:`batch_forward`) evaluates many
samples that share one encoder order at once and is what training uses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, ModalitySpec, MultiModSample, TaskSpec
from .errors import ContractError, FormatError, ShapeError
from .numerics import DenseLayer, DropoutPlan, glorot_layer, mlp_forward

FORMAT_VERSION = 1
HEADS = {"binary": "sigmoid", "multiclass": "softmax", "regression": "identity"}


@dataclass(frozen=True)
class ArchSpec:
    modalities: tuple[ModalitySpec, ...]
    tasks: tuple[TaskSpec, ...]
    state_size: int = 20
    hidden_size: int = 32
    state_activation: str = "relu"

    @classmethod
    def from_manifest(cls, manifest, state_size=20, hidden_size=32, tasks=None, modalities=None, **kw):
        mods = tuple(
            ModalitySpec(m.name, m.dim) for m in manifest.modalities if modalities is None or m.name in modalities
        )
        tsk = tuple(
            TaskSpec(t.name, t.kind, t.n_classes, per_timestep=t.per_timestep)
            for t in manifest.tasks
            if tasks is None or t.name in tasks
        )
        return cls(mods, tsk, state_size, hidden_size, **kw)


@dataclass
class Encoder:
    modality: str
    input_dim: int
    layers: list[DenseLayer]

    @property
    def state_size(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class Decoder:
    task: TaskSpec
    layers: list[DenseLayer]

    @property
    def kind(self) -> str:
        return self.task.kind


class MultiModN:
    def __init__(
        self,
        initial_state: np.ndarray,
        encoders: Sequence[Encoder],
        decoders: Sequence[Decoder],
        seed: int | None = None,
        freeze_initial_state: bool = False,
        metadata: dict | None = None,
    ):
        self.initial_state = np.asarray(initial_state, dtype=np.float64)
        self.encoders = list(encoders)
        self.decoders = list(decoders)
        self.seed = seed
        self.freeze_initial_state = freeze_initial_state
        self.metadata = dict(metadata or {})
        self._validate()

    def _validate(self):
        if not self.encoders or not self.decoders:
            raise ContractError("a model needs at least one encoder and one decoder")
        d = self.state_size
        names = [e.modality for e in self.encoders]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate encoder modalities {names}")
        tasks = [dec.task.name for dec in self.decoders]
        if len(set(tasks)) != len(tasks):
            raise ContractError(f"duplicate decoder tasks {tasks}")
        for e in self.encoders:
            if e.layers[0].in_dim != d + e.input_dim or e.layers[-1].out_dim != d:
                raise ShapeError(f"encoder {e.modality!r} does not map state({d}) + input({e.input_dim}) -> state({d})")
        for dec in self.decoders:
            if dec.layers[0].in_dim != d or dec.layers[-1].out_dim != dec.task.output_dim:
                raise ShapeError(f"decoder {dec.task.name!r} has inconsistent shapes")

    @property
    def state_size(self) -> int:
        return self.initial_state.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.encoders[0].layers[0].out_dim

    @property
    def modality_names(self) -> list[str]:
        return [e.modality for e in self.encoders]

    @property
    def task_names(self) -> list[str]:
        return [d.task.name for d in self.decoders]

    @property
    def tasks(self) -> list[TaskSpec]:
        return [d.task for d in self.decoders]

    def encoder_index(self, modality: str) -> int:
        for i, e in enumerate(self.encoders):
            if e.modality == modality:
                return i
        raise ContractError(f"unknown encoder {modality!r}")

    def decoder(self, task: str) -> Decoder:
        for d in self.decoders:
            if d.task.name == task:
                return d
        raise ContractError(f"unknown decoder {task!r}")

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array views of every parameter, in declaration order."""
        p = {"state0": self.initial_state}
        for e in self.encoders:
            for j, layer in enumerate(e.layers):
                p[f"encoder.{e.modality}.{j}.weight"] = layer.weights
                p[f"encoder.{e.modality}.{j}.bias"] = layer.bias
        for d in self.decoders:
            for j, layer in enumerate(d.layers):
                p[f"decoder.{d.task.name}.{j}.weight"] = layer.weights
                p[f"decoder.{d.task.name}.{j}.bias"] = layer.bias
        return p

    def trainable(self) -> dict[str, np.ndarray]:
        p = self.parameters()
        if self.freeze_initial_state:
            del p["state0"]
        return p

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore(self, snapshot: dict[str, np.ndarray]):
        for k, v in self.parameters().items():
            v[...] = snapshot[k]

    def arch(self) -> ArchSpec:
        return ArchSpec(
            tuple(ModalitySpec(e.modality, e.input_dim) for e in self.encoders),
            tuple(self.tasks),
            self.state_size,
            self.hidden_size,
            self.encoders[0].layers[-1].activation,
        )


def init_model(arch: ArchSpec, seed: int = 0, freeze_initial_state: bool = False) -> MultiModN:
    """Glorot-uniform weights, zero biases, initial state ~ U(-0.1, 0.1)."""
    if arch.state_size < 1 or arch.hidden_size < 1:
        raise ContractError("state_size and hidden_size must be >= 1")
    if not arch.modalities or not arch.tasks:
        raise ContractError("need at least one modality and one task")
    rng = np.random.default_rng(seed)
    d, h = arch.state_size, arch.hidden_size
    s0 = rng.uniform(-0.1, 0.1, size=d)
    encoders = []
    for m in arch.modalities:
        layers = [
            glorot_layer(rng, d + m.dim, h, "relu"),
            glorot_layer(rng, h, h, "relu"),
            glorot_layer(rng, h, d, arch.state_activation),
        ]
        encoders.append(Encoder(m.name, m.dim, layers))
    decoders = []
    for t in arch.tasks:
        layers = [
            glorot_layer(rng, d, h, "relu"),
            glorot_layer(rng, h, h, "relu"),
            glorot_layer(rng, h, t.output_dim, HEADS[t.kind]),
        ]
        decoders.append(Decoder(t, layers))
    return MultiModN(s0, encoders, decoders, seed, freeze_initial_state)


def expected_param_count(arch: ArchSpec) -> int:
    d, h = arch.state_size, arch.hidden_size
    total = d
    for m in arch.modalities:
        total += (d + m.dim) * h + h + h * h + h + h * d + d
    for t in arch.tasks:
        k = t.output_dim
        total += d * h + h + h * h + h + h * k + k
    return total


def is_missing(x) -> bool:
    return x is None or bool(np.isnan(x).any())


def encode_step(encoder: Encoder, state, x, dropout: DropoutPlan | None = None) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (encoder.input_dim,):
        raise ShapeError(f"encoder {encoder.modality!r} expects input ({encoder.input_dim},), got {x.shape}")
    if state.shape != (encoder.state_size,):
        raise ShapeError(f"encoder {encoder.modality!r} expects state ({encoder.state_size},), got {state.shape}")
    out, _ = mlp_forward(encoder.layers, np.concatenate([state, x]), dropout)
    return out


def decode(decoder: Decoder, state, dropout: DropoutPlan | None = None):
    """Binary -> probability, multiclass -> probability vector, regression -> value."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (decoder.layers[0].in_dim,):
        raise ShapeError(f"decoder {decoder.task.name!r} expects state ({decoder.layers[0].in_dim},), got {state.shape}")
    out, _ = mlp_forward(decoder.layers, state, dropout)
    if decoder.kind == "multiclass":
        return out
    return float(out[0])


@dataclass(frozen=True)
class StepTag:
    timestep: int
    encoder: str | None = None
    skipped: bool = False

    @property
    def label(self) -> str:
        if self.encoder is None:
            return "prior" if self.timestep == 0 else f"t{self.timestep}:start"
        prefix = f"t{self.timestep}:" if self.timestep else ""
        return prefix + self.encoder + (" (skipped)" if self.skipped else "")


@dataclass
class StateTrajectory:
    entries: list[tuple[StepTag, np.ndarray]]
    skipped: list[StepTag] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def tags(self) -> list[StepTag]:
        return [t for t, _ in self.entries]

    @property
    def states(self) -> list[np.ndarray]:
        return [s for _, s in self.entries]

    def same_states(self, other: "StateTrajectory") -> bool:
        """Exact (bitwise) equality of tags and states."""
        if self.tags != other.tags:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.states, other.states))


def _resolve_plan(model: MultiModN, plan) -> list[str]:
    if plan is None:
        return model.modality_names
    known = set(model.modality_names)
    for name in plan:
        if name not in known:
            raise ContractError(f"encoding plan names unknown encoder {name!r}")
    return list(plan)


def forward_sequence(
    model: MultiModN,
    sample: MultiModSample,
    plan: Sequence[str] | None = None,
    dropout: DropoutPlan | None = None,
) -> StateTrajectory:
    """Encode one sample; the state is carried across timesteps.

    The sample's own ``encoding_sequence`` (if any) overrides ``plan`` for the
    timesteps it covers.
    """
    plan = _resolve_plan(model, plan)
    state = model.initial_state.copy()
    entries: list[tuple[StepTag, np.ndarray]] = []
    skipped: list[StepTag] = []
    for t, step in enumerate(sample.data):
        entries.append((StepTag(t), state))
        order = plan
        if sample.encoding_sequence is not None:
            order = _resolve_plan(model, sample.encoding_sequence[t])
        for name in order:
            x = step.get(name)
            if is_missing(x):
                skipped.append(StepTag(t, name, True))
                continue
            enc = model.encoders[model.encoder_index(name)]
            state = encode_step(enc, state, x, dropout)
            entries.append((StepTag(t, name), state))
    return StateTrajectory(entries, skipped)


@dataclass
class PredictionGrid:
    """Predictions of every decoder at every recorded state (rows = states)."""

    tags: list[StepTag]
    tasks: list[str]
    rows: list[list]

    def __len__(self):
        return len(self.rows)

    def column(self, task: str) -> list:
        j = self.tasks.index(task)
        return [r[j] for r in self.rows]

    def positive_scores(self) -> np.ndarray:
        """(steps, tasks) array using class-1 probability for multiclass cells."""
        out = np.empty((len(self.rows), len(self.tasks)))
        for i, r in enumerate(self.rows):
            for j, v in enumerate(r):
                out[i, j] = v[1] if isinstance(v, np.ndarray) else v
        return out


def predict_trajectory(model: MultiModN, trajectory: StateTrajectory) -> PredictionGrid:
    rows = [[decode(d, s) for d in model.decoders] for s in trajectory.states]
    return PredictionGrid(trajectory.tags, model.task_names, rows)


# -- batched engine --------------------------------------------------------


@dataclass
class Position:
    """One state slot in a batched pass.

    ``rows`` are the samples whose state was (re)computed here: every row at a
    timestep start, only rows with the modality present at an encoder slot.
    ``state`` holds the full ``(n, d)`` state after the slot, with skipped rows
    passed through unchanged.
    """

    timestep: int
    encoder: int | None
    rows: np.ndarray
    state: np.ndarray
    caches: list | None = None


def batch_forward(
    model: MultiModN,
    inputs: dict[str, np.ndarray],
    orders: Sequence[Sequence[int]],
    dropout: DropoutPlan | None = None,
) -> list[Position]:
    """Encode a batch that shares one encoder order per timestep.

    ``inputs[modality]`` is ``(n, T, dim)`` with NaN marking missing entries;
    ``orders[t]`` lists encoder indices applied at timestep ``t``.
    """
    n = next(iter(inputs.values())).shape[0]
    d = model.state_size
    S = np.broadcast_to(model.initial_state, (n, d)).copy()
    all_rows = np.arange(n)
    positions: list[Position] = []
    for t, order in enumerate(orders):
        positions.append(Position(t, None, all_rows, S))
        for ei in order:
            enc = model.encoders[ei]
            x = inputs[enc.modality][:, t, :]
            if x.shape[1] != enc.input_dim:
                raise ShapeError(f"modality {enc.modality!r} has dim {x.shape[1]}, encoder expects {enc.input_dim}")
            rows = np.flatnonzero(~np.isnan(x).any(axis=1))
            caches = None
            if rows.size:
                out, caches = mlp_forward(enc.layers, np.concatenate([S[rows], x[rows]], axis=1), dropout)
                S = S.copy()
                S[rows] = out
            positions.append(Position(t, ei, rows, S, caches))
    return positions


def sample_orders(
    model: MultiModN,
    n: int,
    timesteps: int,
    plan: Sequence[str] | None = None,
    encoding_sequences=None,
    rng: np.random.Generator | None = None,
) -> dict[tuple, np.ndarray]:
    """Group rows by their per-timestep encoder order.

    Rows with an ``encoding_sequence`` use it; otherwise the plan applies,
    independently permuted per row and timestep when ``rng`` is given.
    """
    base = tuple(model.encoder_index(m) for m in _resolve_plan(model, plan))
    groups: dict[tuple, list[int]] = {}
    for i in range(n):
        seq = encoding_sequences[i] if encoding_sequences is not None else None
        if seq is not None:
            key = tuple(tuple(model.encoder_index(m) for m in step) for step in seq)
        elif rng is not None:
            key = tuple(tuple(int(j) for j in rng.permutation(base)) for _ in range(timesteps))
        else:
            key = (base,) * timesteps
        groups.setdefault(key, []).append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in groups.items()}


@dataclass
class BatchPredictions:
    """Predictions at the final state of each timestep, plus per-slot predictions.

    ``final[task]`` is ``(n, T)`` (``(n, T, k)`` for multiclass);
    ``by_slot[task]`` is ``(n, T, P)`` / ``(n, T, P, k)`` where slot 0 is the
    timestep start and slot ``j`` follows the ``j``-th encoder in the order.
    """

    final: dict[str, np.ndarray]
    by_slot: dict[str, np.ndarray]


def _decode_batch(dec: Decoder, S: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(dec.layers, S)
    return out if dec.kind == "multiclass" else out[:, 0]


def predict_dataset(model: MultiModN, dataset: Dataset, plan=None, *, slots: bool = False) -> BatchPredictions:
    inputs = dataset.model_inputs()
    n, T = len(dataset), dataset.timesteps
    groups = sample_orders(model, n, T, plan, dataset.encoding_sequences)
    P = 1 + max(max((len(o) for o in key), default=0) for key in groups)
    final, by_slot = {}, {}
    for dec in model.decoders:
        k = dec.task.output_dim
        tail = (k,) if dec.kind == "multiclass" else ()
        final[dec.task.name] = np.empty((n, T) + tail)
        if slots:
            by_slot[dec.task.name] = np.empty((n, T, P) + tail)
    for key, rows in groups.items():
        sub = {m: v[rows] for m, v in inputs.items()}
        positions = batch_forward(model, sub, key)
        per_t: dict[int, list[Position]] = {}
        for pos in positions:
            per_t.setdefault(pos.timestep, []).append(pos)
        for t, plist in per_t.items():
            for dec in model.decoders:
                name = dec.task.name
                final[name][rows, t] = _decode_batch(dec, plist[-1].state)
                if slots:
                    for j in range(P):
                        pos = plist[min(j, len(plist) - 1)]
                        by_slot[name][rows, t, j] = _decode_batch(dec, pos.state)
    return BatchPredictions(final, by_slot)


# -- serialization ---------------------------------------------------------


def _layer_doc(name: str, layer: DenseLayer) -> list[dict]:
    return [
        {"name": f"{name}.weight", "shape": list(layer.weights.shape), "values": layer.weights.reshape(-1).tolist()},
        {"name": f"{name}.bias", "shape": list(layer.bias.shape), "values": layer.bias.tolist()},
    ]


def model_to_dict(model: MultiModN) -> dict:
    weights = [{"name": "state0", "shape": [model.state_size], "values": model.initial_state.tolist()}]
    for e in model.encoders:
        for j, layer in enumerate(e.layers):
            weights += _layer_doc(f"encoder.{e.modality}.{j}", layer)
    for d in model.decoders:
        for j, layer in enumerate(d.layers):
            weights += _layer_doc(f"decoder.{d.task.name}.{j}", layer)
    return {
        "format_version": FORMAT_VERSION,
        "type": "multimodn",
        "state_size": model.state_size,
        "hidden_size": model.hidden_size,
        "state_activation": model.encoders[0].layers[-1].activation,
        "seed": model.seed,
        "freeze_initial_state": model.freeze_initial_state,
        "encoders": [{"modality": e.modality, "input_dim": e.input_dim} for e in model.encoders],
        "decoders": [d.task.to_dict() for d in model.decoders],
        "metadata": model.metadata,
        "weights": weights,
    }


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def serialize_model(model) -> str:
    from .pfusion import PFusionModel, pfusion_to_dict

    if isinstance(model, PFusionModel):
        return canonical_json(pfusion_to_dict(model))
    return canonical_json(model_to_dict(model))


def parse_document(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    return doc


def read_weights(doc: dict, shapes: list[tuple[str, tuple]]) -> dict[str, np.ndarray]:
    entries = doc.get("weights")
    if not isinstance(entries, list):
        raise FormatError("model document has no weights list")
    if len(entries) != len(shapes):
        raise FormatError(f"expected {len(shapes)} weight arrays, found {len(entries)}")
    out = {}
    for entry, (name, shape) in zip(entries, shapes):
        if entry.get("name") != name:
            raise FormatError(f"expected weight array {name!r}, found {entry.get('name')!r}")
        values = entry.get("values", [])
        want = int(np.prod(shape))
        if len(values) != want:
            raise FormatError(f"weight array {name!r}: expected {want} values, found {len(values)}")
        out[name] = np.asarray(values, dtype=np.float64).reshape(shape)
    return out


def model_from_dict(doc: dict) -> MultiModN:
    if doc.get("type") != "multimodn":
        raise FormatError(f"document type {doc.get('type')!r} is not 'multimodn'")
    try:
        tasks = tuple(
            TaskSpec(t["name"], t["kind"], t.get("classes"), per_timestep=t.get("per_timestep", False))
            for t in doc["decoders"]
        )
        mods = tuple(ModalitySpec(e["modality"], int(e["input_dim"])) for e in doc["encoders"])
        arch = ArchSpec(mods, tasks, int(doc["state_size"]), int(doc["hidden_size"]), doc["state_activation"])
    except (KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"malformed model header: {exc}") from None
    model = init_model(arch, seed=0, freeze_initial_state=bool(doc.get("freeze_initial_state", False)))
    shapes = [(k, v.shape) for k, v in model.parameters().items()]
    weights = read_weights(doc, shapes)
    model.restore(weights)
    model.seed = doc.get("seed")
    model.metadata = dict(doc.get("metadata") or {})
    return model


def deserialize_model(text: str):
    from .pfusion import pfusion_from_dict

    doc = parse_document(text)
    if doc.get("type") == "pfusion":
        return pfusion_from_dict(doc)
    return model_from_dict(doc)


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(serialize_model(model))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return deserialize_model(fh.read())


def config_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]
