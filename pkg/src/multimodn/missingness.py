"""Injection of MAR / MNAR missingness and the label-flipped test condition."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import ContractError

MODES = ("none", "mar", "mnar")


@dataclass(frozen=True)
class MissingnessSpec:
    """Erase ``modality`` in a fraction ``rate`` of samples.

    ``mnar`` draws only from samples whose stratification label equals
    ``target_class``; ``mar`` draws the fraction from all samples.
    """

    mode: str = "none"
    modality: str | None = None
    rate: float = 0.0
    target_class: int | None = None
    seed: int = 0
    task: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown missingness mode {self.mode!r}")
        if not 0.0 <= float(self.rate) <= 1.0:
            raise ContractError(f"missingness rate {self.rate} outside [0, 1]")
        if self.mode == "mnar" and self.target_class is None:
            raise ContractError("mnar missingness needs a target_class")
        if self.mode != "mnar" and self.target_class is not None:
            raise ContractError("target_class is only meaningful for mnar missingness")
        if self.mode != "none" and self.modality is None:
            raise ContractError(f"{self.mode} missingness needs a modality")

    def with_seed(self, seed: int) -> "MissingnessSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "modality": self.modality,
            "rate": self.rate,
            "target_class": self.target_class,
            "seed": self.seed,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MissingnessSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown missingness field(s): {sorted(unknown)}")
        return cls(**doc)


def select_rows(dataset: Dataset, spec: MissingnessSpec) -> np.ndarray:
    """Sorted indices of the samples that ``spec`` erases."""
    if spec.mode == "none" or spec.rate == 0:
        return np.empty(0, dtype=np.int64)
    dataset.manifest.modality(spec.modality)  # raises on unknown names
    if spec.mode == "mnar":
        task = dataset.manifest.task(spec.task or dataset.manifest.stratify_task)
        if task.kind != "binary":
            raise ContractError(f"mnar injection needs a binary task, {task.name!r} is {task.kind}")
        pool = np.flatnonzero(dataset.labels(task.name) == spec.target_class)
    else:
        pool = np.arange(len(dataset))
    count = int(round(spec.rate * pool.size))
    # a seeded permutation prefix: for one seed, higher rates erase supersets
    order = np.random.default_rng(spec.seed).permutation(pool)
    return np.sort(order[:count])


def apply_missingness(dataset: Dataset, spec: MissingnessSpec) -> Dataset:
    """Copy of ``dataset`` with the selected samples' modality erased at every timestep."""
    if spec.mode != "none":
        dataset.manifest.modality(spec.modality)
    rows = select_rows(dataset, spec)
    out = dataset.copy()
    if rows.size:
        out.features[spec.modality][rows] = np.nan
    return out


def flip_spec(spec: MissingnessSpec) -> MissingnessSpec:
    """Same spec aimed at the other binary class."""
    if spec.mode != "mnar":
        raise ContractError(f"only mnar specs can be flipped, got {spec.mode!r}")
    if spec.target_class not in (0, 1):
        raise ContractError(f"flip needs a binary target class, got {spec.target_class!r}")
    return replace(spec, target_class=1 - int(spec.target_class))


def missing_fraction(dataset: Dataset, modality: str, rows=None) -> float:
    """Fraction of the given samples with ``modality`` missing at every timestep."""
    miss = ~dataset.present(modality).any(axis=1)
    if rows is not None:
        miss = miss[rows]
    return float(miss.mean()) if miss.size else 0.0
