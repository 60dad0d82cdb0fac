"""Experiment drivers: the MNAR grid, parity runs and inference-time modality subsets."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import (
    Dataset,
    SynthModality,
    SynthSpec,
    SynthTask,
    generate_synthetic,
    load_dataset,
    minmax_normalize,
    stratified_kfold,
)
from .errors import ConfigError, ContractError, MultiModNError, NumericError
from .metrics import MetricsReport
from .missingness import MissingnessSpec, apply_missingness, flip_spec
from .model import ArchSpec, MultiModN, config_hash, init_model
from .pfusion import init_pfusion
from .training import TrainingConfig, evaluate_scores, fit

log = logging.getLogger(__name__)

TEST_CONDITIONS = ("none", "same", "flipped")

# Reference spec for the MNAR grid. Each modality sees an overlapping part of
# the latent factors; with this seed either one alone reaches a held-out AUROC
# of about 0.81, so losing one hurts without being fatal.
REFERENCE_MNAR_SPEC = SynthSpec(
    n_samples=2000,
    latent_dim=8,
    modalities=(
        SynthModality("m1", 16, latent=(0, 1, 2, 3, 4)),
        SynthModality("m2", 16, latent=(3, 4, 5, 6, 7)),
    ),
    noise=0.5,
    tasks=(SynthTask("label", "binary"),),
    seed=15,
)


@dataclass
class ExperimentConfig:
    synth: SynthSpec | None = None
    manifest_path: str | None = None
    data_path: str | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    task: str | None = None
    tasks: list[str] | None = None
    modality: str | None = None
    modes: list[str] = field(default_factory=lambda: ["mnar"])
    rates: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.5, 0.8])
    target_class: int = 1
    test_conditions: list[str] = field(default_factory=lambda: list(TEST_CONDITIONS))
    folds: int = 5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if any(not 0.0 <= float(r) <= 1.0 for r in self.rates):
            raise ConfigError(f"missingness rates must lie in [0, 1], got {self.rates}")
        for m in self.modes:
            if m not in ("none", "mar", "mnar"):
                raise ConfigError(f"unknown missingness mode {m!r}")
        for c in self.test_conditions:
            if c not in TEST_CONDITIONS:
                raise ConfigError(f"unknown test condition {c!r}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.synth is None and (self.manifest_path is None or self.data_path is None):
            self.synth = SynthSpec()

    def load(self) -> Dataset:
        if self.manifest_path is not None and self.data_path is not None:
            return load_dataset(self.manifest_path, self.data_path)
        return generate_synthetic(self.synth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict() if self.synth is not None else None
        d["training"] = self.training.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config field(s): {sorted(unknown)}")
        if doc.get("synth") is not None:
            try:
                doc["synth"] = SynthSpec.from_dict(doc["synth"])
            except ContractError as exc:
                raise ConfigError(str(exc)) from None
        doc["training"] = TrainingConfig.from_dict(doc.get("training"))
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class Cell:
    arm: str
    mode: str
    rate: float
    test_condition: str
    report: MetricsReport | None = None
    runs: list[dict] = field(default_factory=list)
    failed: str | None = None

    def key(self):
        return (self.arm, self.mode, self.rate, self.test_condition)

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "mode": self.mode,
            "rate": self.rate,
            "test_condition": self.test_condition,
            "report": self.report.to_dict() if self.report else None,
            "runs": self.runs,
            "failed": self.failed,
        }


@dataclass
class ExperimentResult:
    kind: str
    config_hash: str
    cells: list[Cell]

    def cell(self, arm: str, mode: str = "none", rate: float = 0.0, test_condition: str = "none") -> Cell:
        for c in self.cells:
            if c.key() == (arm, mode, float(rate), test_condition):
                return c
        raise KeyError((arm, mode, rate, test_condition))

    def value(self, arm, mode, rate, test_condition, task, metric="auroc"):
        rep = self.cell(arm, mode, rate, test_condition).report
        v = rep.get(task, metric) if rep else None
        return None if v is None else v.estimate

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config_hash": self.config_hash, "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Long format: one row per (arm, mode, rate, test condition, task, metric)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "mode", "rate", "test_condition", "task", "metric", "value", "ci_low", "ci_high", "failed"])
        for c in self.cells:
            if c.report is None:
                w.writerow([c.arm, c.mode, c.rate, c.test_condition, "", "", "", "", "", c.failed or ""])
                continue
            for task, ms in c.report.tasks.items():
                for metric, v in ms.items():
                    if v is None:
                        w.writerow([c.arm, c.mode, c.rate, c.test_condition, task, metric, "", "", "", ""])
                    else:
                        w.writerow([
                            c.arm, c.mode, c.rate, c.test_condition, task, metric,
                            repr(v.estimate), _opt(v.ci_low), _opt(v.ci_high), "",
                        ])
        return buf.getvalue()


def _opt(v):
    return "" if v is None else repr(float(v))


def _derive_seed(*parts: int) -> int:
    return int(np.random.default_rng([int(p) for p in parts]).integers(2**31 - 1))


def _aggregate_cells(keys, runs_by_key, failures) -> list[Cell]:
    cells = []
    for key in keys:
        runs = runs_by_key.get(key, [])
        cell = Cell(*key, runs=runs)
        if key in failures:
            cell.failed = failures[key]
        elif runs:
            cell.report = MetricsReport.aggregate(runs, [f"{len(runs)} runs"])
        cells.append(cell)
    return cells


def _normalized(train: Dataset, others: Sequence[Dataset], enabled: bool):
    if not enabled:
        return train, list(others), None
    train_n, ranges = minmax_normalize(train)
    return train_n, [minmax_normalize(d, ranges)[0] for d in others], ranges


def _train_arm(arm: str, train: Dataset, val: Dataset, tasks: list[str], cfg: TrainingConfig, seed: int):
    """Fit one arm (``multimodn`` or ``pfusion``) on ``tasks``; returns the trained model."""
    manifest = train.manifest
    cfg = replace(cfg, seed=seed, best_model_metric=None)
    if arm == "pfusion":
        if len(tasks) != 1:
            raise ContractError("the P-Fusion baseline is single-task")
        model = init_pfusion(manifest.modalities, manifest.task(tasks[0]), cfg.hidden_size, seed)
    else:
        arch = ArchSpec.from_manifest(manifest, cfg.state_size, cfg.hidden_size, tasks=tasks, state_activation=cfg.state_activation)
        model = init_model(arch, seed, cfg.freeze_initial_state)
    fit(model, train, val, cfg, state_log=False)
    return model


# -- MNAR grid -------------------------------------------------------------


def _mnar_job(config: ExperimentConfig, dataset: Dataset, mode: str, rate: float, fold: int, split):
    """One (mode, rate, fold) unit: inject, normalize, train both arms, score every test condition."""
    train_idx, val_idx, test_idx = split
    task = config.task or dataset.manifest.stratify_task
    modality = config.modality or dataset.manifest.modality_names[-1]
    inject_seed = _derive_seed(config.seed, fold, 1)
    test_seed = _derive_seed(config.seed, fold, 2)
    model_seed = _derive_seed(config.seed, fold, 3)
    spec = MissingnessSpec(
        mode, modality if mode != "none" else None, rate if mode != "none" else 0.0,
        config.target_class if mode == "mnar" else None, inject_seed, task,
    )
    trainval_idx = np.concatenate([train_idx, val_idx])
    trainval = apply_missingness(dataset.subset(trainval_idx), spec)
    train = trainval.subset(np.arange(train_idx.size))
    val = trainval.subset(np.arange(train_idx.size, trainval_idx.size))
    test = dataset.subset(test_idx)
    conditions = {}
    for cond in config.test_conditions:
        if cond == "none":
            conditions[cond] = test
        elif cond == "same":
            conditions[cond] = apply_missingness(test, spec.with_seed(test_seed))
        elif mode == "mnar":
            conditions[cond] = apply_missingness(test, flip_spec(spec).with_seed(test_seed))
    train, rest, _ = _normalized(train, [val] + list(conditions.values()), config.normalize)
    val, tests = rest[0], dict(zip(conditions, rest[1:]))

    out, failures = {}, {}
    for arm in ("multimodn", "pfusion"):
        try:
            model = _train_arm(arm, train, val, [task], config.training, model_seed)
        except (NumericError, ContractError) as exc:
            for cond in tests:
                failures[(arm, mode, float(rate), cond)] = f"fold {fold}: {exc}"
            continue
        for cond, data in tests.items():
            out[(arm, mode, float(rate), cond)] = evaluate_scores(model, data, [task], config.training.eval_timestep, config.training.eval_window)
    return out, failures


def _run_jobs(fn, jobs: Sequence[tuple], n_workers: int):
    if n_workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def run_mnar_grid(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Train both arms under each (mode, rate) and evaluate on clean, same-pattern and flipped tests."""
    dataset = config.load()
    task = config.task or dataset.manifest.stratify_task
    if task is None or dataset.manifest.task(task).kind != "binary":
        raise ContractError("the missingness grid needs a binary stratification task")
    splits = stratified_kfold(dataset, config.folds, config.seed, task)
    work = [(config, dataset, mode, float(rate), k, splits[k]) for mode in config.modes for rate in config.rates for k in range(config.folds)]
    results = _run_jobs(_mnar_job, work, jobs)
    runs_by_key: dict[tuple, list] = {}
    failures: dict[tuple, str] = {}
    for out, fail in results:
        for key, scores in out.items():
            runs_by_key.setdefault(key, []).append(scores)
        failures.update(fail)
    keys = []
    for mode in config.modes:
        for rate in config.rates:
            for arm in ("multimodn", "pfusion"):
                for cond in config.test_conditions:
                    if cond == "flipped" and mode != "mnar":
                        continue
                    keys.append((arm, mode, float(rate), cond))
    return ExperimentResult("mnar-grid", config.hash(), _aggregate_cells(keys, runs_by_key, failures))


# -- parity ----------------------------------------------------------------


def _parity_job(config: ExperimentConfig, dataset: Dataset, seed: int, split):
    train_idx, val_idx, test_idx = split
    train, (val, test), _ = _normalized(dataset.subset(train_idx), [dataset.subset(val_idx), dataset.subset(test_idx)], config.normalize)
    tasks = config.tasks or dataset.manifest.task_names
    cfg = config.training
    out = {}
    multi = _train_arm("multimodn", train, val, tasks, cfg, seed)
    out["multimodn-multi"] = evaluate_scores(multi, test, tasks, cfg.eval_timestep, cfg.eval_window)
    single, pf = {}, {}
    for t in tasks:
        single.update(evaluate_scores(_train_arm("multimodn", train, val, [t], cfg, seed), test, [t], cfg.eval_timestep, cfg.eval_window))
        pf.update(evaluate_scores(_train_arm("pfusion", train, val, [t], cfg, seed), test, [t], cfg.eval_timestep, cfg.eval_window))
    out["multimodn-single"] = single
    out["pfusion"] = pf
    return out


def run_parity(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Single-task vs multi-task MultiModN vs P-Fusion, one run per seed.

    Run ``i`` uses fold ``i mod folds`` of one stratified split and model seed ``seeds[i]``.
    """
    dataset = config.load()
    tasks = config.tasks or dataset.manifest.task_names
    if len(tasks) < 2:
        raise ContractError("parity runs need at least two tasks")
    splits = stratified_kfold(dataset, config.folds, config.seed)
    work = [(config, dataset, s, splits[i % config.folds]) for i, s in enumerate(config.seeds)]
    results = _run_jobs(_parity_job, work, jobs)
    arms = ("multimodn-single", "multimodn-multi", "pfusion")
    runs_by_key = {(arm, "none", 0.0, "none"): [r[arm] for r in results] for arm in arms}
    return ExperimentResult("parity", config.hash(), _aggregate_cells(list(runs_by_key), runs_by_key, {}))


# -- inference-time modality subsets ---------------------------------------


def mask_modalities(dataset: Dataset, keep: Sequence[str]) -> Dataset:
    """Copy with every modality outside ``keep`` marked missing."""
    names = dataset.manifest.modality_names
    unknown = set(keep) - set(names)
    if unknown:
        raise ContractError(f"unknown modalities {sorted(unknown)}")
    out = dataset.copy()
    for m in names:
        if m not in keep:
            out.features[m][:] = np.nan
    return out


def subset_label(subset: Sequence[str]) -> str:
    return "+".join(subset) if subset else "prior"


def run_inference_combinations(model: MultiModN, dataset: Dataset, subsets: Sequence[Sequence[str]], timestep: int = -1) -> ExperimentResult:
    """Evaluate one trained model with only each subset of modalities available."""
    cells = []
    for subset in subsets:
        try:
            scores = evaluate_scores(model, mask_modalities(dataset, subset), timestep=timestep)
            cells.append(Cell("multimodn", "subset", 0.0, subset_label(subset), MetricsReport.single(scores), [scores]))
        except MultiModNError as exc:
            cells.append(Cell("multimodn", "subset", 0.0, subset_label(subset), failed=str(exc)))
    doc = {"subsets": [list(s) for s in subsets], "timestep": timestep, "provenance": dataset.provenance}
    return ExperimentResult("inference-combinations", config_hash(doc), cells)
