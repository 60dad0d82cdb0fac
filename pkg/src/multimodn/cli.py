"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    NormalizationRanges,
    SynthSpec,
    apply_ranges,
    generate_synthetic,
    load_dataset,
    minmax_normalize,
    save_dataset,
    stratified_kfold,
)
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .experiments import ExperimentConfig, run_inference_combinations, run_mnar_grid, run_parity, subset_label
from .interpret import cumulative_predictions, export_heatmap, importance_scores
from .model import ArchSpec, MultiModN, init_model, load_model, save_model
from .modularity import modularity
from .pfusion import init_pfusion
from .training import TrainingConfig, evaluate, fit

log = logging.getLogger("multimodn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRAIN_KEYS = {"training", "arm", "tasks", "modalities", "fold", "folds", "split_seed", "normalize"}


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, args, config: dict, seeds: dict, inputs=()):
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    _write_json(out / "run_manifest.json", doc)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------


def cmd_gen_synth(args) -> int:
    doc = _read_json(args.spec) if args.spec else {}
    try:
        spec = SynthSpec.from_dict(doc)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _outdir(args.out)
    ds = generate_synthetic(spec)
    save_dataset(ds, out)
    _write_manifest(out, args, spec.to_dict(), {"seed": spec.seed})
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def _train_config(path) -> dict:
    doc = _read_json(path) if path else {}
    unknown = set(doc) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
    return doc


def cmd_train(args) -> int:
    doc = _train_config(args.config)
    cfg = TrainingConfig.from_dict(doc.get("training"))
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    arm = doc.get("arm", "multimodn")
    if arm not in ("multimodn", "pfusion"):
        raise ConfigError(f"unknown arm {arm!r}")
    fold, folds, split_seed = int(doc.get("fold", 0)), int(doc.get("folds", 5)), int(doc.get("split_seed", 0))
    if not 0 <= fold < folds:
        raise ConfigError(f"fold {fold} outside 0..{folds - 1}")

    ds = load_dataset(args.manifest, args.data)
    train_idx, val_idx, test_idx = stratified_kfold(ds, folds, split_seed)[fold]
    ranges = None
    if doc.get("normalize", True):
        _, ranges = minmax_normalize(ds, fit_indices=train_idx)
        ds = apply_ranges(ds, ranges)
    tasks = doc.get("tasks") or ds.manifest.task_names
    if arm == "pfusion":
        if len(tasks) != 1:
            raise ConfigError("the P-Fusion arm trains exactly one task; set 'tasks' to a single name")
        model = init_pfusion(ds.manifest.modalities, ds.manifest.task(tasks[0]), cfg.hidden_size, cfg.seed)
    else:
        arch = ArchSpec.from_manifest(
            ds.manifest, cfg.state_size, cfg.hidden_size, tasks=tasks,
            modalities=doc.get("modalities"), state_activation=cfg.state_activation,
        )
        model = init_model(arch, cfg.seed, cfg.freeze_initial_state)
    model.metadata = {
        "normalization": ranges.to_dict() if ranges else None,
        "split": {"fold": fold, "folds": folds, "seed": split_seed},
        "training": cfg.to_dict(),
    }
    report = fit(model, ds.subset(train_idx), ds.subset(val_idx), cfg)

    out = _outdir(args.out)
    save_model(model, out / "model.json")
    (out / "fit_report.json").write_text(report.to_json() + "\n")
    (out / "epochs.csv").write_text(report.epoch_csv())
    if isinstance(model, MultiModN):
        (out / "states.csv").write_text(report.state_csv())
    _write_manifest(out, args, {**doc, "training": cfg.to_dict()}, {"training": cfg.seed, "split": split_seed}, [args.manifest, args.data])
    print(f"best epoch {report.best_epoch}: {report.best_metric[0]} {report.best_metric[1]} = {report.best_value}")
    return EXIT_OK


def _prepared(model, manifest, data):
    """Load a dataset and apply the normalization stored with the model."""
    ds = load_dataset(manifest, data)
    norm = model.metadata.get("normalization")
    if norm:
        ds = apply_ranges(ds, NormalizationRanges.from_dict(norm))
    return ds


def _split_rows(model, ds, split: str):
    if split == "all":
        return ds
    info = model.metadata.get("split")
    if not info:
        raise ConfigError("model has no recorded split; use --split all")
    train, val, test = stratified_kfold(ds, info["folds"], info["seed"])[info["fold"]]
    return ds.subset({"train": train, "val": val, "test": test}[split])


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = _split_rows(model, _prepared(model, args.manifest, args.data), args.split)
    report = evaluate(model, ds, timestep=args.timestep)
    out = _outdir(args.out)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.csv").write_text(report.to_csv())
    _write_manifest(out, args, vars_config(args), {}, [args.model, args.manifest, args.data])
    print(report.to_csv(), end="")
    return EXIT_OK


def _find_sample(ds, ident: str) -> int:
    if ident in ds.sample_ids:
        return ds.sample_ids.index(ident)
    try:
        i = int(ident)
    except ValueError:
        raise ConfigError(f"no sample {ident!r}") from None
    if not 0 <= i < len(ds):
        raise ConfigError(f"sample index {i} outside 0..{len(ds) - 1}")
    return i


def cmd_explain(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, MultiModN):
        raise ConfigError("explanations need a MultiModN model")
    ds = _split_rows(model, _prepared(model, args.manifest, args.data), args.split)
    out = _outdir(args.out)
    if args.mode == "imc":
        product = importance_scores(model, ds, args.aggregation, args.timestep)
        path = export_heatmap(product, out / "importance.csv")
    else:
        if args.sample is None:
            raise ConfigError("--mode cp needs --sample")
        i = _find_sample(ds, args.sample)
        product = cumulative_predictions(model, ds.sample(i))
        path = export_heatmap(product, out / f"cumulative_{ds.sample_ids[i]}.csv")
    _write_manifest(out, args, vars_config(args), {}, [args.model, args.manifest, args.data])
    print(f"wrote {path}")
    return EXIT_OK


def _experiment(args):
    doc = _read_json(args.config) if args.config else {}
    return ExperimentConfig.from_dict(doc)


def _write_result(out: Path, result, args, config: ExperimentConfig):
    (out / "result.json").write_text(result.to_json() + "\n")
    (out / "result.csv").write_text(result.to_csv())
    inputs = [p for p in (config.manifest_path, config.data_path) if p]
    _write_manifest(out, args, config.to_dict(), {"seed": config.seed, "seeds": config.seeds}, inputs)


def cmd_mnar_sim(args) -> int:
    config = _experiment(args)
    result = run_mnar_grid(config, jobs=args.jobs)
    out = _outdir(args.out)
    _write_result(out, result, args, config)
    print(result.to_csv(), end="")
    return EXIT_OK


def cmd_parity(args) -> int:
    config = _experiment(args)
    result = run_parity(config, jobs=args.jobs)
    out = _outdir(args.out)
    _write_result(out, result, args, config)
    print(result.to_csv(), end="")
    return EXIT_OK


def _parse_subsets(text: str) -> list[list[str]]:
    return [[m for m in part.split(",") if m] for part in text.split(";")]


def cmd_infer_combos(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, MultiModN):
        raise ConfigError("inference combinations need a MultiModN model")
    ds = _split_rows(model, _prepared(model, args.manifest, args.data), args.split)
    subsets = _parse_subsets(args.subsets) if args.subsets else _all_subsets(model.modality_names)
    result = run_inference_combinations(model, ds, subsets, args.timestep)
    out = _outdir(args.out)
    (out / "result.json").write_text(result.to_json() + "\n")
    (out / "result.csv").write_text(result.to_csv())
    _write_manifest(out, args, {**vars_config(args), "subsets": [subset_label(s) for s in subsets]}, {}, [args.model, args.manifest, args.data])
    print(result.to_csv(), end="")
    return EXIT_OK


def _all_subsets(names):
    from itertools import combinations

    return [list(c) for r in range(len(names) + 1) for c in combinations(names, r)]


def cmd_modularity(args) -> int:
    q, trace, sq, m = modularity(args.modalities, args.tasks, exact=True)
    print(f"Q = {q} ≈ {float(q):.4f}")
    print(f"trace = {trace} ≈ {float(trace):.4f}")
    print(f"square_sum = {sq} ≈ {float(sq):.4f}")
    print(f"m = {m}")
    return EXIT_OK


def vars_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multimodn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic dataset (manifest.json + data.csv)")
    g.add_argument("--spec", help="synthetic spec JSON (defaults if omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model on one fold")
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--manifest", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def data_args(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
        sp.add_argument("--timestep", type=int, default=-1)
        sp.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a saved model")
    data_args(e)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="importance scores (imc) or cumulative predictions (cp)")
    data_args(x)
    x.set_defaults(timestep=0)
    x.add_argument("--mode", choices=("imc", "cp"), required=True)
    x.add_argument("--sample", help="sample id or row index (cp mode)")
    x.add_argument("--aggregation", choices=("mean-signed", "mean-absolute"), default="mean-signed")
    x.set_defaults(func=cmd_explain)

    for name, fn, helptext in (
        ("mnar-sim", cmd_mnar_sim, "missingness grid for both arms"),
        ("parity", cmd_parity, "single-task vs multi-task parity runs"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="experiment config JSON")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--out", required=True)
        s.set_defaults(func=fn)

    c = sub.add_parser("infer-combos", help="evaluate with only subsets of modalities available")
    data_args(c)
    c.add_argument("--subsets", help="';'-separated subsets of ','-separated modalities (all subsets if omitted)")
    c.set_defaults(func=cmd_infer_combos)

    m = sub.add_parser("modularity", help="modularity score for M modules and T tasks")
    m.add_argument("--modalities", type=int, required=True)
    m.add_argument("--tasks", type=int, required=True)
    m.set_defaults(func=cmd_modularity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
