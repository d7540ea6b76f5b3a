"""Command-line entry points.

Every command reads an optional JSON config (flat keys, see README), fills in
defaults, and echoes the resolved config into the report it writes. Exit
codes: 0 success, 2 bad flags, 3 config or validation error, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetError, MultilabelDataset, load_dataset, read_matrix, write_matrix
from .layers import GMUClassifier, ModelSpec, ShapeError
from .metrics import (
    LabelMatrix,
    gate_activation_fractions,
    multilabel_f1,
    select_units_by_mutual_information,
    threshold_probs,
    unit_scores,
)
from .reporting import ReportError, emit_report
from .synthetic import (
    SYNTH_BUDGET,
    TIE_TOLERANCE,
    export_activation_grid,
    fit_synthetic,
    make_params,
    run_synthetic_suite,
    write_grid,
)
from .training import DivergenceError, HyperConfig, random_hyperparameter_search, train_model

EXIT_OK, EXIT_FLAGS, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


_HYPER = {f.name: f.default for f in fields(HyperConfig) if f.name != "seed"}
_SPEC = {f.name: f.default for f in fields(ModelSpec) if f.name != "kind"}

DATA_DEFAULTS = {
    "features": None,
    "labels": None,
    "dev_fraction": 0.1,
    "test_fraction": 0.3,
    "threshold": 0.5,
    "weighted_mode": "support",
}
TRAIN_DEFAULTS = {"model": "gmu", **DATA_DEFAULTS, **_HYPER, **_SPEC}
SEARCH_DEFAULTS = {**TRAIN_DEFAULTS, "n_trials": 25, "log_uniform": True}
EVALUATE_DEFAULTS = {"predictions": None, "labels": None, "threshold": 0.5, "weighted_mode": "support"}
GATE_DEFAULTS = {"gates": None, "predictions": None, "threshold": 0.5, "top_k": 16}

PRESETS = {
    "default": dict(d=2, sep=1.5, noise_offset=3.0, std=1.0, noise_std=1.0),
    "separated": dict(d=2, sep=1.5, noise_offset=3.0, std=0.5, noise_std=0.5),
    "grid": dict(d=1, sep=1.5, noise_offset=4.5, std=1.0, noise_std=1.0),
}
_BUDGET_KEYS = ("learning_rate", "max_epochs", "batch_size", "init_range")


def _synth_defaults(preset: str) -> dict:
    return {
        "preset": preset,
        **PRESETS[preset],
        "p_c": 0.5,
        "p_m": 0.5,
        "n_per_class": 200,
        "stratified": True,
        "train_fraction": 0.7,
        **{k: getattr(SYNTH_BUDGET, k) for k in _BUDGET_KEYS},
    }


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return raw, p.parent


def resolve(raw: dict, defaults: dict, required: tuple[str, ...] = ()) -> dict:
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {**defaults, **raw}
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    return cfg


def _path(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _hyper(cfg: dict, seed: int) -> HyperConfig:
    return HyperConfig(**{k: cfg[k] for k in _HYPER}, seed=seed)


def _spec(cfg: dict) -> ModelSpec:
    return ModelSpec(kind=cfg["model"], **{k: cfg[k] for k in _SPEC})


def _load_split(cfg: dict, base: Path, seed: int):
    feats = cfg["features"]
    if not isinstance(feats, list) or not feats:
        raise ConfigError("'features' must be a non-empty list of CSV paths")
    ds = load_dataset([_path(base, f) for f in feats], _path(base, cfg["labels"]))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    test, dev, train = ds.split([cfg["test_fraction"], cfg["dev_fraction"]], rng)
    if min(train.n, dev.n, test.n) < 2:
        raise ConfigError(f"split too small: train={train.n}, dev={dev.n}, test={test.n}")
    return train, dev, test


def _test_outputs(model, test: MultilabelDataset, cfg: dict, out: Path) -> dict:
    probs = model.predict_proba(list(test.features))
    write_matrix(out / "predictions.csv", test.ids, test.label_names, probs)
    if isinstance(model, GMUClassifier):
        z = model.gates(list(test.features))[0]
        write_matrix(out / "gates.csv", test.ids, [f"z{u}" for u in range(z.shape[1])], z)
    pred = threshold_probs(probs, cfg["threshold"], test.label_names)
    truth = LabelMatrix(test.labels, test.label_names)
    metrics = multilabel_f1(pred, truth, cfg["weighted_mode"]).to_dict()
    emit_report({"metrics": metrics}, out / "metrics.json", cfg)
    return metrics


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, raw, base) -> int:
    cfg = resolve(raw, TRAIN_DEFAULTS, ("features", "labels"))
    train, dev, test = _load_split(cfg, base, args.seed)
    report = train_model(_spec(cfg), train, dev, _hyper(cfg, args.seed))
    metrics = _test_outputs(report.model, test, cfg, args.out)
    emit_report({"train": report.to_dict(), "test_metrics": metrics,
                 "sizes": {"train": train.n, "dev": dev.n, "test": test.n}},
                args.out / "train_report.json", cfg, args.seed)
    print(f"train {cfg['model']}: best epoch {report.best_epoch}, dev macro-f1 "
          f"{report.best_dev_macro_f1 or 0.0:.4f}, test macro-f1 {metrics['f1_macro']:.4f}")
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def cmd_hypersearch(args, raw, base) -> int:
    cfg = resolve(raw, SEARCH_DEFAULTS, ("features", "labels"))
    if args.n is not None:
        cfg["n_trials"] = args.n
    train, dev, test = _load_split(cfg, base, args.seed)
    result = random_hyperparameter_search(
        _spec(cfg), train, dev, int(cfg["n_trials"]), args.seed,
        base=_hyper(cfg, args.seed), log_uniform=cfg["log_uniform"], jobs=args.jobs)
    metrics = _test_outputs(result.best.model, test, cfg, args.out)
    emit_report({"search": result.to_dict(), "test_metrics": metrics},
                args.out / "search_report.json", cfg, args.seed)
    print(f"hypersearch {cfg['model']}: {len(result.trials)} trials, best #{result.best_index} "
          f"dev macro-f1 {result.best.best_dev_macro_f1 or 0.0:.4f}, test macro-f1 {metrics['f1_macro']:.4f}")
    return EXIT_DIVERGED if all(t.diverged for t in result.trials) else EXIT_OK


def cmd_evaluate(args, raw, base) -> int:
    cfg = resolve(raw, EVALUATE_DEFAULTS, ("predictions", "labels"))
    truth_ds = load_dataset([], _path(base, cfg["labels"]))
    p_ids, p_names, probs = read_matrix(_path(base, cfg["predictions"]))
    if tuple(p_names) != truth_ds.label_names:
        raise ConfigError(f"prediction columns {p_names} do not match labels {list(truth_ds.label_names)}")
    index = {k: i for i, k in enumerate(truth_ds.ids)}
    missing = [k for k in p_ids if k not in index]
    if missing:
        raise ConfigError(f"predicted ids missing from the label file: {missing[:5]}")
    truth = truth_ds.labels[[index[k] for k in p_ids]]
    pred = threshold_probs(probs, cfg["threshold"], truth_ds.label_names)
    metrics = multilabel_f1(pred, LabelMatrix(truth, truth_ds.label_names), cfg["weighted_mode"])
    emit_report({"metrics": metrics.to_dict()}, args.out / "metrics.json", cfg, args.seed)
    print(f"evaluate: {len(p_ids)} samples, f1 samples {metrics.f1_samples:.4f} micro {metrics.f1_micro:.4f} "
          f"macro {metrics.f1_macro:.4f} weighted {metrics.f1_weighted:.4f}")
    return EXIT_OK


def cmd_gate_analysis(args, raw, base) -> int:
    cfg = resolve(raw, GATE_DEFAULTS, ("gates", "predictions"))
    g_ids, units, z = read_matrix(_path(base, cfg["gates"]))
    p_ids, label_names, probs = read_matrix(_path(base, cfg["predictions"]))
    index = {k: i for i, k in enumerate(p_ids)}
    if sorted(index) != sorted(g_ids):
        raise ConfigError("gate and prediction files cover different ids")
    pred = threshold_probs(probs[[index[k] for k in g_ids]], cfg["threshold"], label_names)
    top_k = min(int(cfg["top_k"]), z.shape[1])
    selected = select_units_by_mutual_information(z, pred, top_k)
    scores = unit_scores(z, pred)
    fractions = gate_activation_fractions(z, pred, selected)
    emit_report({
        "selected_units": [units[u] for u in selected],
        "unit_mutual_information": {units[u]: float(s) for u, s in enumerate(scores)},
        "labels": {f.label: {"n_predicted": f.n_predicted, "visual_pct": f.visual_pct,
                             "textual_pct": f.textual_pct} for f in fractions},
    }, args.out / "gate_analysis.json", cfg, args.seed)
    print(f"gate-analysis: {len(selected)} units selected over {len(g_ids)} samples, {len(label_names)} labels")
    return EXIT_OK


def _synth_cfg(raw: dict, preset_default: str, extra: dict | None = None) -> dict:
    preset = raw.get("preset", preset_default)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return resolve(raw, {**_synth_defaults(preset), **(extra or {})})


def _synth_params(cfg: dict, seed: int):
    keys = ("d", "sep", "noise_offset", "std", "noise_std", "p_c", "p_m", "n_per_class", "stratified")
    return make_params(**{k: cfg[k] for k in keys}, seed=seed)


def _budget(cfg: dict) -> HyperConfig:
    return replace(SYNTH_BUDGET, **{k: cfg[k] for k in _BUDGET_KEYS})


def cmd_synth_run(args, raw, base) -> int:
    cfg = _synth_cfg(raw, "default")
    run = fit_synthetic(_synth_params(cfg, args.seed), _budget(cfg), cfg["train_fraction"])
    emit_report({"record": asdict(run.record)}, args.out / "synth_run.json", cfg, args.seed)
    r = run.record
    print(f"synth-run: gmu {r.gmu_accuracy:.4f} logistic {r.logistic_accuracy:.4f} "
          f"corr(z, M) {r.gate_latent_correlation if r.gate_latent_correlation is not None else float('nan'):.4f}")
    return EXIT_DIVERGED if r.gmu_diverged or r.logistic_diverged else EXIT_OK


def cmd_synth_suite(args, raw, base) -> int:
    cfg = _synth_cfg(raw, "default", {"n_experiments": 1000, "tie_tolerance": TIE_TOLERANCE})
    if args.n is not None:
        cfg["n_experiments"] = args.n
    result = run_synthetic_suite(_synth_params(cfg, 0), int(cfg["n_experiments"]), args.seed, jobs=args.jobs,
                                 budget=_budget(cfg), train_fraction=cfg["train_fraction"],
                                 tie_tolerance=cfg["tie_tolerance"])
    emit_report(result.to_dict(), args.out / "synth_suite.json", cfg, args.seed)
    print(f"synth-suite: {len(result.records)} experiments, wins {result.wins} ties {result.ties} "
          f"losses {result.losses}, mean corr {result.mean_correlation or 0.0:.4f}")
    return EXIT_OK


def cmd_synth_grid(args, raw, base) -> int:
    cfg = _synth_cfg(raw, "grid", {"bounds": [[-5.0, 8.0], [-5.0, 8.0]], "resolution": 101})
    if cfg["d"] != 1:
        raise ConfigError("synth-grid needs d = 1")
    run = fit_synthetic(_synth_params(cfg, args.seed), _budget(cfg), cfg["train_fraction"])
    grid = export_activation_grid(run.gmu, cfg["bounds"], int(cfg["resolution"]))
    args.out.mkdir(parents=True, exist_ok=True)
    write_grid(grid, args.out / "grid.csv")
    test = run.test_rows
    z_at, _ = grid.lookup(run.data.x_v[test, 0], run.data.x_t[test, 0])
    isolated = float(np.mean((z_at > 0.5) == (run.data.m[test] == 1)))
    emit_report({"record": asdict(run.record), "grid_isolation": isolated, "rows": len(grid.rows())},
                args.out / "synth_grid.json", cfg, args.seed)
    print(f"synth-grid: {len(grid.rows())} lattice rows, held-out samples on the noise-suppressing side {isolated:.3f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "hypersearch": cmd_hypersearch,
    "synth-run": cmd_synth_run,
    "synth-suite": cmd_synth_suite,
    "synth-grid": cmd_synth_grid,
    "gate-analysis": cmd_gate_analysis,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmufusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--n", type=int, help="trials (hypersearch) or experiments (synth-suite)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes; never changes results")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_FLAGS
    try:
        raw, base = read_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, raw, base)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, ReportError, ShapeError, ValueError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
