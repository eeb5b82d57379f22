"""Command-line entry point: generate, train, sample, evaluate, ablate.

Every artifact embeds the package version, the resolved configuration and
its hash. Wall-clock timestamps live under ``generated_at`` only, so two runs
with the same inputs differ in nothing else.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._util import config_hash
from .data_io import (
    CheckpointError,
    DatasetError,
    SynthConfig,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    read_slice_csv,
    save_checkpoint,
    save_dataset,
    write_jsonl,
    write_slice_csv,
)
from .geometry import SpatialSlice
from .metrics import METRIC_NAMES, CentroidClassifier, TransitionRuleSet, count_implausible, metric_report
from .sampler import IntegrationConfig, ivp_sample, next_step_sample
from .trainer import TrainConfig, make_coupling, slice_profiles, train, training_pairs
from .velocity import DivergenceError

log = logging.getLogger("contextflow")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5
EXIT_OTHER = 1

IMPLAUSIBLE_SAMPLES = 5000
IMPLAUSIBLE_MAX_CELLS = 1000

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "mode": "coupling_mode",
    "lam": "lam",
    "alpha": "alpha",
    "epsilon": "epsilon",
    "sigma": "sigma",
    "lr": "lr",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "radius": "radius",
    "holdout": "holdout",
    "seed": "seed",
}


class ConfigError(ValueError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _envelope(config: dict, **body) -> dict:
    return {"version": __version__, "config": config, "config_hash": config_hash(config),
            **body, "generated_at": _now()}


def resolve_train_config(args) -> TrainConfig:
    base = _read_json(args.config) if getattr(args, "config", None) else {}
    base = dict(base.get("train", base))
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_integration(args, defaults: dict | None = None) -> IntegrationConfig:
    defaults = defaults or {}
    method = args.method or defaults.get("method", "rk4")
    steps = args.steps or defaults.get("steps", 100)
    try:
        return IntegrationConfig(method, steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_rules(path, dataset=None):
    """Forbidden transitions from a JSON file, else from the dataset manifest, else None.

    The file holds either a list of ``[from, to]`` label pairs or an object
    with that list under ``"forbidden"``.
    """
    if path:
        raw = _read_json(path)
        pairs = raw.get("forbidden") if isinstance(raw, dict) else raw
        if not isinstance(pairs, list) or not all(isinstance(p, list) and len(p) == 2 for p in pairs):
            raise ConfigError(f"{path}: expected a list of [from, to] label pairs")
        return TransitionRuleSet.from_pairs(pairs)
    if dataset is not None and dataset.meta.get("forbidden_transitions"):
        return TransitionRuleSet.from_pairs(dataset.meta["forbidden_transitions"])
    return None


def implausible_report(dataset, cfg: TrainConfig, rules: TransitionRuleSet, seed: int,
                       samples: int = IMPLAUSIBLE_SAMPLES, max_cells: int = IMPLAUSIBLE_MAX_CELLS) -> dict:
    """Implausible-transition counts of the configured coupling on each training pair.

    Slices larger than ``max_cells`` are subsampled (seeded) to keep the plan
    in memory; neighborhood profiles still come from the whole slice.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i, j in training_pairs(len(dataset), cfg.holdout):
        a, b = dataset[i], dataset[j]
        if a.labels is None or b.labels is None:
            raise DatasetError(f"slices {i} and {j} need cell-type labels to count implausible transitions")
        idx_a = np.sort(rng.choice(a.n, max_cells, replace=False)) if a.n > max_cells else np.arange(a.n)
        idx_b = np.sort(rng.choice(b.n, max_cells, replace=False)) if b.n > max_cells else np.arange(b.n)
        prof_a = prof_b = None
        if cfg.coupling_mode in ("pacm", "paer"):
            prof_a = slice_profiles(a, cfg.radius).subset(idx_a)
            prof_b = slice_profiles(b, cfg.radius).subset(idx_b)
        coupling = make_coupling(a.subset(idx_a), b.subset(idx_b), cfg, prof_a, prof_b)
        count = count_implausible(coupling, a.labels[idx_a], b.labels[idx_b], rules, samples, rng)
        out.append({"pair": [i, j], "count": count, "samples": samples,
                    "n_cells": [int(len(idx_a)), int(len(idx_b))]})
    return {"pairs": out, "total": int(sum(p["count"] for p in out)),
            "rules": sorted(list(p) for p in rules.forbidden), "seed": seed}


# --- subcommands -----------------------------------------------------------

def cmd_generate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ds = generate_synthetic(cfg)
    manifest = save_dataset(ds, args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rules = load_rules(args.rules, dataset)
    result = train(dataset, cfg)
    config = {"train": cfg.to_dict(), "dataset": str(args.dataset),
              "rules": None if args.rules is None else str(args.rules)}
    save_checkpoint(out / "checkpoint.json", result.field, result.optimizer, config)
    write_jsonl(result.log, out / "train_log.jsonl")
    body = {"final_loss": result.log[-1]["loss"] if result.log else None,
            "slice_usage": {str(k): v for k, v in sorted(result.slice_usage.items())}}
    if rules is not None:
        body["implausible"] = implausible_report(dataset, cfg, rules, cfg.seed)
    _write_json(out / "run.json", _envelope(config, **body))
    print(out / "checkpoint.json")
    return 0


def _sample(field, dataset, mode, target, integ, holdout=()):
    if mode == "ivp":
        return ivp_sample(field, dataset, target, integ), 0
    return next_step_sample(field, dataset, target, integ, unavailable=holdout), target - 1


def cmd_sample(args) -> int:
    dataset = load_dataset(args.dataset)
    field, _, ck_config = load_checkpoint(args.checkpoint, expected_dim=dataset.d)
    integ = resolve_integration(args)
    holdout = set(args.holdout or ())
    if args.mode == "next-step" and args.target - 1 in holdout:
        raise ConfigError(f"preceding slice {args.target - 1} is held out")
    X, source = _sample(field, dataset, args.mode, args.target, integ, holdout)
    src = dataset[source]
    pred = SpatialSlice(dataset[args.target].time, X, src.coords)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    config = {"mode": args.mode, "target": args.target, "method": integ.method,
              "steps_per_unit_time": integ.steps_per_unit_time, "checkpoint_config": ck_config}
    comments = [
        f"contextflow {__version__}",
        f"checkpoint_sha256 {digest}",
        f"config_hash {config_hash(config)}",
        f"config {json.dumps(config, sort_keys=True)}",
    ]
    write_slice_csv(args.out, pred, comments)
    print(args.out)
    return 0


def _metrics_list(spec) -> list:
    names = [m.strip() for m in spec.split(",") if m.strip()] if isinstance(spec, str) else list(spec)
    bad = [m for m in names if m not in METRIC_NAMES]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRIC_NAMES)}")
    return names


def _classifier(reference, holdout):
    slices = [s for i, s in enumerate(reference.slices) if i not in set(holdout)]
    return CentroidClassifier.fit_slices(slices)


def _needs_classifier(metrics):
    return any(m in ("weighted_w2", "kl") for m in metrics)


def evaluate_prediction(X_pred, truth: SpatialSlice, reference, holdout, metrics, seed) -> dict:
    clf = _classifier(reference, holdout) if _needs_classifier(metrics) else None
    if _needs_classifier(metrics) and truth.labels is None:
        raise DatasetError("the truth slice has no labels; drop weighted_w2/kl from --metrics")
    return metric_report(X_pred, truth.expr, metrics, truth.labels, clf, seed=seed)


def cmd_evaluate(args) -> int:
    metrics = _metrics_list(args.metrics)
    pred = read_slice_csv(args.predicted)
    truth = read_slice_csv(args.truth)
    reference = load_dataset(args.reference) if args.reference else None
    if reference is None and _needs_classifier(metrics):
        raise ConfigError("--reference is required for weighted_w2 and kl")
    seed = args.seed if args.seed is not None else 0
    report = evaluate_prediction(pred.expr, truth, reference, args.holdout or (), metrics, seed)
    config = {"predicted": str(args.predicted), "truth": str(args.truth),
              "reference": None if args.reference is None else str(args.reference),
              "holdout": list(args.holdout or ()), "metrics": metrics, "seed": seed}
    _write_json(args.out, _envelope(config, metrics=report))
    print(args.out)
    return 0


_MODE_PARAMS = {"random": (), "eot": ("epsilon",), "pacm": ("lam", "alpha", "epsilon"), "paer": ("lam", "epsilon")}


def ablation_cells(base: TrainConfig, grid: dict) -> list:
    """Unique (mode, lambda, alpha, epsilon) settings; unused knobs collapse to None."""
    modes = grid.get("coupling_mode", [base.coupling_mode])
    lams = grid.get("lam", [base.lam])
    alphas = grid.get("alpha", [base.alpha])
    epss = grid.get("epsilon", [base.epsilon])
    seen, cells = set(), []
    for mode, lam, alpha, eps in itertools.product(modes, lams, alphas, epss):
        used = _MODE_PARAMS[mode] if mode in _MODE_PARAMS else ()
        cell = {"coupling_mode": mode,
                "lam": lam if "lam" in used else None,
                "alpha": alpha if "alpha" in used else None,
                "epsilon": eps if "epsilon" in used else None}
        key = tuple(cell.values())
        if key not in seen:
            seen.add(key)
            cells.append(cell)
    return cells


def cell_name(cell: dict) -> str:
    parts = [cell["coupling_mode"]]
    for k, tag in (("lam", "lam"), ("alpha", "alpha"), ("epsilon", "eps")):
        if cell[k] is not None:
            parts.append(f"{tag}{cell[k]:g}")
    return "_".join(parts)


def run_cell(dataset_path, train_dict, sampling, metrics, metric_seed, rules_path=None) -> dict:
    """Train, sample and evaluate one configuration; returns the metric report."""
    cfg = TrainConfig.from_dict(train_dict)
    dataset = load_dataset(dataset_path)
    result = train(dataset, cfg)
    integ = IntegrationConfig(sampling.get("method", "rk4"), sampling.get("steps", 100))
    target = int(sampling["target"])
    X, _ = _sample(result.field, dataset, sampling.get("mode", "next-step"), target, integ, cfg.holdout)
    report = evaluate_prediction(X, dataset[target], dataset, cfg.holdout, metrics, metric_seed)
    rules = load_rules(rules_path, dataset)
    if rules is not None:
        report["implausible"] = implausible_report(dataset, cfg, rules, metric_seed)
    return report


def _cell_task(task):
    return run_cell(*task)


def cmd_ablate(args) -> int:
    spec = _read_json(args.config) if args.config else {}
    base_dict = dict(spec.get("train", {}))
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            base_dict[key] = val
    try:
        base = TrainConfig.from_dict(base_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    grid = spec.get("grid", {})
    seeds = args.seeds if args.seeds else spec.get("seeds", [base.seed])
    metrics = _metrics_list(args.metrics or spec.get("metrics", ["w2", "mmd", "energy"]))
    sampling = dict(spec.get("sampling", {}))
    if args.target is not None:
        sampling["target"] = args.target
    if args.sample_mode is not None:
        sampling["mode"] = args.sample_mode
    if args.method is not None:
        sampling["method"] = args.method
    if args.steps is not None:
        sampling["steps"] = args.steps
    if "target" not in sampling:
        if not base.holdout:
            raise ConfigError("ablate needs a sampling target (or a holdout slice to default to)")
        sampling["target"] = base.holdout[0]
    sampling.setdefault("mode", "next-step")
    sampling.setdefault("method", "rk4")
    sampling.setdefault("steps", 100)

    cells = ablation_cells(base, grid)
    tasks, keys = [], []
    for cell in cells:
        for seed in seeds:
            train_dict = base.to_dict()
            train_dict.update({k: v for k, v in cell.items() if v is not None})
            train_dict["coupling_mode"] = cell["coupling_mode"]
            train_dict["seed"] = int(seed)
            try:
                TrainConfig.from_dict(train_dict)
            except ValueError as exc:
                raise ConfigError(f"grid cell {cell_name(cell)}: {exc}") from exc
            tasks.append((str(args.dataset), train_dict, sampling, metrics, int(seed), args.rules))
            keys.append((cell, int(seed), train_dict))

    if args.workers and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_cell_task, tasks))
    else:
        reports = [_cell_task(t) for t in tasks]

    out = Path(args.out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    by_cell: dict = {}
    for (cell, seed, train_dict), report in zip(keys, reports):
        config = {"train": train_dict, "dataset": str(args.dataset), "sampling": sampling,
                  "metrics": metrics, "cell": cell, "rules": args.rules}
        _write_json(out / "cells" / f"{cell_name(cell)}_seed{seed}.json", _envelope(config, metrics=report))
        by_cell.setdefault(cell_name(cell), (cell, []))[1].append(report)

    rows = []
    for name, (cell, reports_c) in by_cell.items():
        row = dict(cell, cell=name, n_seeds=len(reports_c))
        columns = {m: [r[m]["value"] for r in reports_c] for m in metrics}
        if all("implausible" in r for r in reports_c):
            columns["implausible"] = [r["implausible"]["total"] for r in reports_c]
        for m, vals in columns.items():
            vals = np.asarray(vals, dtype=float)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    agg_config = {"base_train": base.to_dict(), "grid": grid, "seeds": [int(s) for s in seeds],
                  "sampling": sampling, "metrics": metrics, "dataset": str(args.dataset), "rules": args.rules}
    _write_json(out / "aggregate.json", _envelope(agg_config, table=rows))
    columns = metrics + (["implausible"] if rows and "implausible_mean" in rows[0] else [])
    _write_table_csv(out / "aggregate.csv", rows, columns)
    print(out / "aggregate.json")
    return 0


def _write_table_csv(path, rows, metrics):
    cols = ["cell", "coupling_mode", "lam", "alpha", "epsilon", "n_seeds"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols + [f"{m}_mean,{m}_std" for m in metrics]) + "\n")
        for r in rows:
            vals = ["" if r[c] is None else str(r[c]) for c in cols]
            vals += [f"{r[f'{m}_mean']!r},{r[f'{m}_std']!r}" for m in metrics]
            fh.write(",".join(vals) + "\n")


# --- parser ----------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--mode", choices=["random", "eot", "pacm", "paer"], help="coupling mode")
    p.add_argument("--lambda", dest="lam", type=float, help="SS/LR trade-off in the plausibility matrix")
    p.add_argument("--alpha", type=float, help="cost/prior trade-off for the prior-aware cost")
    p.add_argument("--epsilon", type=float, help="entropic regularization")
    p.add_argument("--sigma", type=float, help="path noise standard deviation")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--radius", type=float, help="neighborhood radius (default: 5%% of bbox diagonal)")
    p.add_argument("--holdout", type=int, nargs="*", help="slice indices withheld from training")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contextflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"contextflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="synthetic-data JSON config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a velocity field")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="training JSON config (flags override it)")
    _add_train_flags(p)
    p.add_argument("--rules", help="JSON list of forbidden [from, to] cell-type transitions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="integrate a trained field to a target slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["ivp", "next-step"], default="next-step")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--method", choices=["euler", "rk4"])
    p.add_argument("--steps", type=int, help="integration steps per unit time")
    p.add_argument("--holdout", type=int, nargs="*")
    p.add_argument("--seed", type=int, help="accepted for uniformity; sampling is deterministic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a predicted slice against the truth")
    p.add_argument("--predicted", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--reference", help="dataset manifest used to fit the cell-type classifier")
    p.add_argument("--holdout", type=int, nargs="*", help="slices excluded from classifier fitting")
    p.add_argument("--metrics", default="w2,mmd,energy")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep coupling mode x lambda x alpha x epsilon over seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="sweep JSON: train, grid, seeds, sampling, metrics")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--metrics")
    p.add_argument("--target", type=int)
    p.add_argument("--sample-mode", dest="sample_mode", choices=["ivp", "next-step"])
    p.add_argument("--method", choices=["euler", "rk4"])
    p.add_argument("--steps", type=int)
    p.add_argument("--rules", help="JSON list of forbidden [from, to] cell-type transitions")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"error [dataset]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error [checkpoint]: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error [diverged]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, IndexError) as exc:
        print(f"error [runtime]: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
