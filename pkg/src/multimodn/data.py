"""Dataset contract, CSV/manifest ingestion, normalization, folds and synthetic data.

Features are held per modality as ``(n_samples, n_timesteps, dim)`` float
arrays where NaN marks a missing entry. A modality is considered missing at a
timestep when any of its entries is NaN. Targets are ``(n,)`` for static
tasks and ``(n, T)`` for per-timestep tasks, NaN meaning "no valid target".
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

TASK_KINDS = ("binary", "multiclass", "regression")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    columns: tuple[int, int] | None = None
    treat_missing_as_zero: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError(f"modality {self.name!r} must have a positive dim")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "binary"
    n_classes: int | None = None
    column: int | None = None
    per_timestep: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r} for task {self.name!r}")
        if self.kind == "multiclass" and (self.n_classes is None or self.n_classes < 2):
            raise ContractError(f"multiclass task {self.name!r} needs n_classes >= 2")

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.kind == "multiclass" else 1

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "multiclass":
            d["classes"] = self.n_classes
        if self.column is not None:
            d["column"] = self.column
        d["per_timestep"] = self.per_timestep
        return d


@dataclass
class DatasetManifest:
    modalities: list[ModalitySpec]
    tasks: list[TaskSpec]
    timesteps: int = 1
    stratify_task: str | None = None

    def __post_init__(self):
        if self.timesteps < 1:
            raise ContractError("timesteps must be >= 1")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate modality names in {names}")
        tnames = [t.name for t in self.tasks]
        if len(set(tnames)) != len(tnames):
            raise ContractError(f"duplicate task names in {tnames}")
        if self.stratify_task is None:
            for t in self.tasks:
                if t.kind != "regression":
                    self.stratify_task = t.name
                    break
        elif self.stratify_task not in tnames:
            raise ContractError(f"stratify_task {self.stratify_task!r} is not a task")

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ContractError(f"unknown modality {name!r}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ContractError(f"unknown task {name!r}")

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def with_columns(self) -> "DatasetManifest":
        """Copy with CSV column spans assigned in declaration order."""
        col = 0
        mods = []
        for m in self.modalities:
            mods.append(replace(m, columns=(col, col + m.dim)))
            col += m.dim
        tasks = []
        for t in self.tasks:
            tasks.append(replace(t, column=col))
            col += 1
        return DatasetManifest(mods, tasks, self.timesteps, self.stratify_task)

    def to_dict(self) -> dict:
        mods = []
        for m in self.modalities:
            d = {"name": m.name, "dim": m.dim}
            if m.columns is not None:
                d["columns"] = list(m.columns)
            if m.treat_missing_as_zero:
                d["treat_missing_as_zero"] = True
            mods.append(d)
        return {
            "modalities": mods,
            "tasks": [t.to_dict() for t in self.tasks],
            "timesteps": self.timesteps,
            "stratify_task": self.stratify_task,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        try:
            mods = [
                ModalitySpec(
                    str(m["name"]),
                    int(m["dim"]),
                    tuple(m["columns"]) if m.get("columns") is not None else None,
                    bool(m.get("treat_missing_as_zero", False)),
                )
                for m in doc["modalities"]
            ]
            tasks = []
            for t in doc["tasks"]:
                kind = t.get("kind", "binary")
                if kind not in TASK_KINDS:
                    raise FormatError(f"unknown task kind {kind!r} for task {t.get('name')!r}")
                tasks.append(
                    TaskSpec(
                        str(t["name"]),
                        kind,
                        t.get("classes"),
                        t.get("column"),
                        bool(t.get("per_timestep", False)),
                    )
                )
            manifest = cls(mods, tasks, int(doc.get("timesteps", 1)), doc.get("stratify_task"))
        except KeyError as exc:
            raise FormatError(f"manifest is missing field {exc}") from None
        except ContractError as exc:
            raise FormatError(str(exc)) from None
        manifest.check_spans()
        return manifest

    def check_spans(self):
        spans = []
        for m in self.modalities:
            if m.columns is None:
                continue
            lo, hi = m.columns
            if hi - lo != m.dim or lo < 0:
                raise FormatError(f"modality {m.name!r}: span {m.columns} does not hold {m.dim} columns")
            spans.append((lo, hi, m.name))
        for t in self.tasks:
            if t.column is not None:
                spans.append((t.column, t.column + 1, t.name))
        spans.sort()
        for (a_lo, a_hi, a), (b_lo, b_hi, b) in zip(spans, spans[1:]):
            if b_lo < a_hi:
                raise FormatError(f"column spans of {a!r} and {b!r} overlap")


@dataclass
class MultiModSample:
    """One data point: per-timestep modality vectors (None = missing) and targets."""

    data: list[dict[str, np.ndarray | None]]
    targets: dict[str, float | np.ndarray]
    encoding_sequence: list[list[str]] | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.encoding_sequence is not None and len(self.encoding_sequence) != len(self.data):
            raise ContractError(
                f"encoding_sequence has length {len(self.encoding_sequence)}, data has {len(self.data)}"
            )

    @property
    def timesteps(self) -> int:
        return len(self.data)


@dataclass
class Dataset:
    manifest: DatasetManifest
    features: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    sample_ids: list[str]
    provenance: str = ""
    encoding_sequences: list[list[list[str]] | None] | None = None

    def __post_init__(self):
        n = len(self.sample_ids)
        T = self.manifest.timesteps
        for m in self.manifest.modalities:
            arr = self.features.get(m.name)
            if arr is None or arr.shape != (n, T, m.dim):
                got = None if arr is None else arr.shape
                raise ContractError(f"features[{m.name!r}] has shape {got}, expected {(n, T, m.dim)}")
        for t in self.manifest.tasks:
            arr = self.targets.get(t.name)
            want = (n, T) if t.per_timestep else (n,)
            if arr is None or arr.shape != want:
                got = None if arr is None else arr.shape
                raise ContractError(f"targets[{t.name!r}] has shape {got}, expected {want}")
        if self.encoding_sequences is not None and len(self.encoding_sequences) != n:
            raise ContractError("encoding_sequences must have one entry per sample")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def timesteps(self) -> int:
        return self.manifest.timesteps

    def present(self, modality: str) -> np.ndarray:
        """Boolean ``(n, T)`` presence mask of a modality."""
        return ~np.isnan(self.features[modality]).any(axis=2)

    def model_inputs(self) -> dict[str, np.ndarray]:
        """Feature arrays as fed to models (``treat_missing_as_zero`` applied)."""
        out = {}
        for m in self.manifest.modalities:
            arr = self.features[m.name]
            out[m.name] = np.nan_to_num(arr, nan=0.0) if m.treat_missing_as_zero else arr
        return out

    def labels(self, task: str | None = None) -> np.ndarray:
        """Class labels of a discrete task (last timestep for per-timestep tasks)."""
        name = task or self.manifest.stratify_task
        if name is None:
            raise ContractError("dataset has no discrete task to stratify on")
        spec = self.manifest.task(name)
        if spec.kind == "regression":
            raise ContractError(f"task {name!r} is continuous; cannot derive class labels")
        y = self.targets[name]
        if spec.per_timestep:
            y = y[:, -1]
        return y

    def sample(self, i: int) -> MultiModSample:
        data = []
        for t in range(self.timesteps):
            step = {}
            for m in self.manifest.modalities:
                v = self.features[m.name][i, t]
                step[m.name] = None if np.isnan(v).all() else v.copy()
            data.append(step)
        targets = {name: (arr[i].copy() if arr.ndim == 2 else float(arr[i])) for name, arr in self.targets.items()}
        seq = self.encoding_sequences[i] if self.encoding_sequences is not None else None
        return MultiModSample(data, targets, seq, self.sample_ids[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        seqs = None
        if self.encoding_sequences is not None:
            seqs = [self.encoding_sequences[i] for i in idx]
        return Dataset(
            self.manifest,
            {k: v[idx].copy() for k, v in self.features.items()},
            {k: v[idx].copy() for k, v in self.targets.items()},
            [self.sample_ids[i] for i in idx],
            self.provenance,
            seqs,
        )

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))

    def with_manifest(self, manifest: DatasetManifest) -> "Dataset":
        return Dataset(manifest, self.features, self.targets, self.sample_ids, self.provenance, self.encoding_sequences)

    def missing_count(self) -> int:
        return int(sum(np.isnan(v).sum() for v in self.features.values()))

    def equals(self, other: "Dataset") -> bool:
        if self.manifest.to_dict() != other.manifest.to_dict() or self.sample_ids != other.sample_ids:
            return False
        for k in self.features:
            if not np.array_equal(self.features[k], other.features[k], equal_nan=True):
                return False
        for k in self.targets:
            if not np.array_equal(self.targets[k], other.targets[k], equal_nan=True):
                return False
        return True


def _from_samples(manifest: DatasetManifest, samples: Sequence[MultiModSample]) -> Dataset:
    """Build a dataset from sample objects (missing vectors become NaN rows)."""
    n, T = len(samples), manifest.timesteps
    feats = {m.name: np.full((n, T, m.dim), np.nan) for m in manifest.modalities}
    targs = {t.name: np.full((n, T) if t.per_timestep else (n,), np.nan) for t in manifest.tasks}
    for i, s in enumerate(samples):
        if s.timesteps != T:
            raise ContractError(f"sample {i} has {s.timesteps} timesteps, manifest says {T}")
        for t, step in enumerate(s.data):
            for name, v in step.items():
                if v is not None:
                    feats[name][i, t] = v
        for name, v in s.targets.items():
            targs[name][i] = v
    seqs = [s.encoding_sequence for s in samples]
    if all(q is None for q in seqs):
        seqs = None
    return Dataset(manifest, feats, targs, [s.sample_id or str(i) for i, s in enumerate(samples)], "samples", seqs)


dataset_from_samples = _from_samples


# -- CSV ingestion ---------------------------------------------------------


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    return float(text)


def load_dataset(manifest_path, data_path) -> Dataset:
    """Read a JSON manifest and a CSV with one row per (sample_id, timestep)."""
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    manifest = DatasetManifest.from_dict(doc)
    for m in manifest.modalities:
        if m.columns is None:
            raise FormatError(f"modality {m.name!r} has no column span")
    for t in manifest.tasks:
        if t.column is None:
            raise FormatError(f"task {t.name!r} has no column")
    T = manifest.timesteps

    with open(data_path, newline="") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw.encode()).hexdigest()
    reader = csv.reader(io.StringIO(raw))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{data_path}: empty file") from None
    width = len(header)
    n_data_cols = width - 2
    needed = max([m.columns[1] for m in manifest.modalities] + [t.column + 1 for t in manifest.tasks])
    if needed > n_data_cols:
        raise FormatError(f"manifest references data column {needed - 1}, file has {n_data_cols}")

    rows: dict[str, dict[int, tuple[list[float], int]]] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"{data_path}:{lineno}: expected {width} fields, got {len(row)}")
        sid = row[0]
        try:
            t = int(row[1])
            values = [_parse_cell(c) for c in row[2:]]
        except ValueError as exc:
            raise FormatError(f"{data_path}:{lineno}: {exc}") from None
        if not 0 <= t < T:
            raise FormatError(f"{data_path}:{lineno}: timestep {t} outside [0, {T})")
        if sid not in rows:
            rows[sid] = {}
            order.append(sid)
        if t in rows[sid]:
            raise FormatError(f"{data_path}:{lineno}: duplicate row for sample {sid!r} timestep {t}")
        rows[sid][t] = (values, lineno)

    n = len(order)
    feats = {m.name: np.full((n, T, m.dim), np.nan) for m in manifest.modalities}
    targs = {t.name: np.full((n, T) if t.per_timestep else (n,), np.nan) for t in manifest.tasks}
    for i, sid in enumerate(order):
        for t in range(T):
            if t not in rows[sid]:
                raise FormatError(f"{data_path}: sample {sid!r} has no row for timestep {t}")
            values, lineno = rows[sid][t]
            for m in manifest.modalities:
                lo, hi = m.columns
                feats[m.name][i, t] = values[lo:hi]
            for task in manifest.tasks:
                v = values[task.column]
                if not math.isnan(v):
                    _check_target(task, v, data_path, lineno)
                if task.per_timestep:
                    targs[task.name][i, t] = v
                elif t == 0:
                    targs[task.name][i] = v
    return Dataset(manifest, feats, targs, order, f"file sha256:{digest}")


def _check_target(task: TaskSpec, v: float, path, lineno):
    if task.kind == "binary" and v not in (0.0, 1.0):
        raise FormatError(f"{path}:{lineno}: binary task {task.name!r} has value {v}")
    if task.kind == "multiclass" and (v != int(v) or not 0 <= v < task.n_classes):
        raise FormatError(f"{path}:{lineno}: class index {v} invalid for task {task.name!r}")


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def save_dataset(dataset: Dataset, directory, manifest_name="manifest.json", data_name="data.csv"):
    """Write ``manifest.json`` + ``data.csv``; returns the two paths."""
    os.makedirs(directory, exist_ok=True)
    manifest = dataset.manifest.with_columns()
    mpath = os.path.join(directory, manifest_name)
    dpath = os.path.join(directory, data_name)
    with open(mpath, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
    header = ["sample_id", "timestep"]
    for m in manifest.modalities:
        header += [f"{m.name}_{j}" for j in range(m.dim)]
    header += [t.name for t in manifest.tasks]
    with open(dpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, sid in enumerate(dataset.sample_ids):
            for t in range(manifest.timesteps):
                row = [sid, str(t)]
                for m in manifest.modalities:
                    row += [_fmt(v) for v in dataset.features[m.name][i, t]]
                for task in manifest.tasks:
                    arr = dataset.targets[task.name]
                    row.append(_fmt(arr[i, t] if task.per_timestep else arr[i]))
                w.writerow(row)
    return mpath, dpath


# -- normalization ---------------------------------------------------------


@dataclass
class NormalizationRanges:
    minimum: dict[str, np.ndarray]
    maximum: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "minimum": {k: v.tolist() for k, v in self.minimum.items()},
            "maximum": {k: v.tolist() for k, v in self.maximum.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationRanges":
        return cls(
            {k: np.asarray(v, dtype=np.float64) for k, v in doc["minimum"].items()},
            {k: np.asarray(v, dtype=np.float64) for k, v in doc["maximum"].items()},
            list(doc.get("warnings", [])),
        )


def fit_ranges(dataset: Dataset, indices=None) -> NormalizationRanges:
    sub = dataset if indices is None else dataset.subset(indices)
    mins, maxs, warns = {}, {}, []
    for m in dataset.manifest.modalities:
        flat = sub.features[m.name].reshape(-1, m.dim)
        seen = ~np.isnan(flat)
        empty = ~seen.any(axis=0)
        if empty.any():
            cols = np.flatnonzero(empty).tolist()
            raise ContractError(f"modality {m.name!r} features {cols} have no observed value")
        lo = np.nanmin(flat, axis=0)
        hi = np.nanmax(flat, axis=0)
        for j in np.flatnonzero(hi == lo):
            msg = f"feature {m.name}[{j}] is constant; normalized to 0"
            warns.append(msg)
            log.warning(msg)
        mins[m.name], maxs[m.name] = lo, hi
    return NormalizationRanges(mins, maxs, warns)


def apply_ranges(dataset: Dataset, ranges: NormalizationRanges) -> Dataset:
    feats = {}
    for m in dataset.manifest.modalities:
        x = dataset.features[m.name]
        lo, hi = ranges.minimum[m.name], ranges.maximum[m.name]
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        y = np.clip((x - lo) / safe, 0.0, 1.0)
        y = np.where(span > 0, y, 0.0)
        feats[m.name] = np.where(np.isnan(x), np.nan, y)
    return Dataset(
        dataset.manifest, feats, {k: v.copy() for k, v in dataset.targets.items()},
        list(dataset.sample_ids), dataset.provenance, dataset.encoding_sequences,
    )


def minmax_normalize(dataset: Dataset, ranges: NormalizationRanges | None = None, fit_indices=None):
    """Scale every feature to [0, 1]; returns ``(normalized, ranges)``.

    Ranges are fitted on ``fit_indices`` (the training split) unless given.
    Values outside the fitted range are clipped; missing entries stay NaN.
    """
    if ranges is None:
        ranges = fit_ranges(dataset, fit_indices)
    return apply_ranges(dataset, ranges), ranges


# -- folds -----------------------------------------------------------------


def stratified_kfold(dataset_or_labels, n_folds: int = 5, seed: int = 0, task: str | None = None):
    """Label-stratified 80/10/10 folds.

    Samples are dealt into ``2 * n_folds`` shards per class. Fold ``k`` tests
    on shard ``2k``, validates on shard ``2k + 1`` and trains on the rest.
    Returns a list of ``(train, val, test)`` index arrays.
    """
    if isinstance(dataset_or_labels, Dataset):
        labels = dataset_or_labels.labels(task)
    else:
        labels = np.asarray(dataset_or_labels)
    if np.isnan(labels.astype(float)).any():
        raise ContractError("stratification labels contain missing values")
    n_shards = 2 * n_folds
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_shards)]
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < n_shards:
            raise ContractError(f"class {cls} has {members.size} members, need at least {n_shards}")
        members = rng.permutation(members)
        for j, idx in enumerate(members):
            shards[(offset + j) % n_shards].append(int(idx))
        offset = (offset + members.size) % n_shards
    shards = [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]
    folds = []
    for k in range(n_folds):
        test = shards[(2 * k) % n_shards]
        val = shards[(2 * k + 1) % n_shards]
        train = np.sort(np.concatenate([s for j, s in enumerate(shards) if j not in ((2 * k) % n_shards, (2 * k + 1) % n_shards)]))
        folds.append((train, val, test))
    return folds


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SynthModality:
    name: str
    dim: int = 16
    latent: tuple[int, ...] | None = None
    null: bool = False


@dataclass(frozen=True)
class SynthTask:
    name: str
    kind: str = "binary"
    per_timestep: bool = False
    latent: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 2000
    latent_dim: int = 8
    modalities: tuple[SynthModality, ...] = (SynthModality("m1", 16), SynthModality("m2", 16))
    noise: float = 0.5
    tasks: tuple[SynthTask, ...] = (
        SynthTask("label_a", "binary"),
        SynthTask("label_b", "binary"),
        SynthTask("score", "regression"),
    )
    timesteps: int = 1
    drift: float = 0.25
    seed: int = 0

    def validate(self):
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be >= 1")
        if not self.modalities:
            raise ContractError("at least one modality is required")
        if not self.tasks:
            raise ContractError("at least one task is required")
        if self.timesteps < 1:
            raise ContractError("timesteps must be >= 1")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        for m in self.modalities:
            if m.dim < 1:
                raise ContractError(f"modality {m.name!r}: dim must be >= 1")
            for j in m.latent or ():
                if not 0 <= j < self.latent_dim:
                    raise ContractError(f"modality {m.name!r}: latent index {j} out of range")
        for t in self.tasks:
            if t.kind not in ("binary", "regression"):
                raise ContractError(f"task {t.name!r}: synthetic tasks are binary or regression")
            for j in t.latent or ():
                if not 0 <= j < self.latent_dim:
                    raise ContractError(f"task {t.name!r}: latent index {j} out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ContractError(f"unknown synthetic spec field(s): {sorted(unknown)}")
        kw = dict(doc)
        try:
            if "modalities" in kw:
                kw["modalities"] = tuple(
                    SynthModality(**{**m, "latent": tuple(m["latent"]) if m.get("latent") is not None else None})
                    for m in kw["modalities"]
                )
            if "tasks" in kw:
                kw["tasks"] = tuple(
                    SynthTask(**{**t, "latent": tuple(t["latent"]) if t.get("latent") is not None else None})
                    for t in kw["tasks"]
                )
            spec = cls(**kw)
        except TypeError as exc:
            raise ContractError(f"invalid synthetic spec: {exc}") from None
        spec.validate()
        return spec


@dataclass
class SynthComponents:
    """Mixing matrices and task directions drawn for a spec (deterministic per seed)."""

    mixing: dict[str, np.ndarray]
    directions: dict[str, np.ndarray]


def synthetic_components(spec: SynthSpec) -> SynthComponents:
    rng = np.random.default_rng([spec.seed, 1])
    k = spec.latent_dim
    mixing = {}
    for m in spec.modalities:
        a = rng.normal(size=(m.dim, k))
        if m.null:
            a[:] = 0.0
        elif m.latent is not None:
            hidden = np.setdiff1d(np.arange(k), np.asarray(m.latent, dtype=np.int64))
            a[:, hidden] = 0.0
        mixing[m.name] = a
    directions = {}
    for t in spec.tasks:
        w = rng.normal(size=k)
        if t.latent is not None:
            keep = np.zeros(k, dtype=bool)
            keep[list(t.latent)] = True
            w[~keep] = 0.0
        directions[t.name] = w
    return SynthComponents(mixing, directions)


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def generate_synthetic(spec: SynthSpec | None = None) -> Dataset:
    """Latent-factor multimodal data.

    ``z ~ N(0, I_k)``; modality features are ``A_m z + noise``; binary labels
    are ``1[w . z > 0]``; regression targets are ``Phi(v . z / |v|)`` in [0, 1].
    Null modalities carry pure noise. For several timesteps the latent takes a
    Gaussian random walk with step ``drift``; static targets use the first
    timestep's latent.
    """
    spec = spec or SynthSpec()
    spec.validate()
    comps = synthetic_components(spec)
    rng = np.random.default_rng([spec.seed, 2])
    n, k, T = spec.n_samples, spec.latent_dim, spec.timesteps
    z0 = rng.normal(size=(n, k))
    steps = rng.normal(scale=spec.drift, size=(n, T, k))
    steps[:, 0] = 0.0
    z = z0[:, None, :] + np.cumsum(steps, axis=1)

    feats = {}
    for m in spec.modalities:
        a = comps.mixing[m.name]
        noise_scale = spec.noise if not m.null else max(spec.noise, 1.0)
        feats[m.name] = z @ a.T + rng.normal(scale=noise_scale, size=(n, T, m.dim))

    targets = {}
    tasks = []
    for t in spec.tasks:
        w = comps.directions[t.name]
        proj = z @ w  # (n, T)
        if t.kind == "binary":
            y = (proj > 0).astype(np.float64)
        else:
            y = _normal_cdf(proj / np.linalg.norm(w))
        targets[t.name] = y if t.per_timestep else y[:, 0]
        tasks.append(TaskSpec(t.name, t.kind, per_timestep=t.per_timestep))

    manifest = DatasetManifest(
        [ModalitySpec(m.name, m.dim) for m in spec.modalities], tasks, T
    )
    spec_hash = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    ids = [f"s{i:05d}" for i in range(n)]
    return Dataset(manifest, feats, targets, ids, f"synthetic spec:{spec_hash}").with_manifest(manifest.with_columns())


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
