"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The slow experiments (suite of 1000, fusion comparison) are marked ``slow`` so
they can be deselected with ``-m "not slow"`` while iterating.
"""
import numpy as np
import pytest

import cliruns
import gradcases
from conftest import ACCEPTANCE
from gmufusion.data import MultilabelDataset
from gmufusion.layers import ModelSpec
from gmufusion.metrics import multilabel_f1
from gmufusion.regularization import batch_norm_forward, dropout_forward
from gmufusion.synthetic import (
    export_activation_grid,
    fit_synthetic,
    grid_params,
    make_params,
    run_fusion_comparison,
    run_synthetic_experiment,
    run_synthetic_suite,
    separated_params,
)
from gmufusion.training import HyperConfig, train_model
from oracles import brute_force_f1


def record(n, ok, text):
    ACCEPTANCE[n] = (bool(ok), text)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
    assert ok, text


def test_criterion_1_gradient_fidelity():
    cases = {**{f"primitive {k}": v for k, v in gradcases.PRIMITIVE_CASES.items()},
             **{f"layer {k}": v for k, v in gradcases.LAYER_CASES.items()}}
    errors = {name: gradcases.max_relative_error(case, n_points=20)[0] for name, case in cases.items()}
    worst = max(errors, key=errors.get)
    record(1, errors[worst] < gradcases.TOL,
           f"{len(cases)} gradient checks at 20 points, worst {worst} rel err {errors[worst]:.2e} (< 1e-5)")


@pytest.mark.slow
def test_criterion_2_synthetic_suite():
    suite = run_synthetic_suite(make_params(), 1000, master_seed=0)
    record(2, suite.wins >= 250 and suite.losses <= 10,
           f"n=1000 wins {suite.wins} (>= 250) ties {suite.ties} losses {suite.losses} (<= 10)")


def test_criterion_3_gate_latent_recovery():
    corrs = []
    for seed in range(50):
        c = run_synthetic_experiment(separated_params(seed=seed)).gate_latent_correlation
        corrs.append(0.0 if c is None else abs(c))
    corrs = np.array(corrs)
    good = int(np.sum(corrs >= 0.90))
    record(3, corrs.mean() >= 0.95 and good >= 45,
           f"mean |corr(z, M)| {corrs.mean():.4f} (>= 0.95), {good}/50 seeds >= 0.90 (need 45)")


def test_criterion_4_metrics_oracle():
    rng = np.random.default_rng(20240)
    keys = ("f1_samples", "f1_micro", "f1_macro", "f1_weighted")
    worst = 0.0
    for _ in range(1000):
        n, q = rng.integers(1, 9), rng.integers(1, 5)
        pred = (rng.random((n, q)) < 0.5).astype(int)
        truth = (rng.random((n, q)) < 0.5).astype(int)
        for mode in ("support", "literal"):
            r = multilabel_f1(pred, truth, mode)
            ref = brute_force_f1(pred.tolist(), truth.tolist(), mode)
            worst = max(worst, *(abs(getattr(r, k) - ref[k]) for k in keys))
    perfect = multilabel_f1([[1, 0, 1], [0, 1, 1]], [[1, 0, 1], [0, 1, 1]])
    superset = multilabel_f1([[1, 1]], [[1, 0]])
    pair = multilabel_f1([[1, 0], [1, 0]], [[1, 0], [0, 1]])
    hand = (all(getattr(perfect, k) == 1.0 for k in keys) and superset.f1_samples == 2 / 3
            and pair.f1_micro == 0.5 and abs(pair.f1_macro - 1 / 3) < 1e-16)
    record(4, worst <= 1e-12 and hand,
           f"1000 random pairs x 2 weighted modes, max abs diff {worst:.1e} (<= 1e-12); hand examples {'exact' if hand else 'WRONG'}")


@pytest.mark.slow
def test_criterion_5_fusion_advantage():
    res = run_fusion_comparison(range(10))
    means = {k: res.mean(k) for k in res.macro_f1}
    others = [k for k in means if k != "gmu"]
    ok = all(means["gmu"] >= means[k] for k in others)
    record(5, ok, "mean macro-f1 over 10 seeds: " + ", ".join(f"{k} {v:.4f}" for k, v in means.items()))


def test_criterion_6_regularizer_invariants():
    rng = np.random.default_rng(6)
    # max-norm after every optimizer step
    n = 120
    s = rng.normal(size=(n, 2))
    y = (s.sum(axis=1) > 0).astype(int)[:, None]
    ds = MultilabelDataset((np.hstack([s[:, :1], rng.normal(size=(n, 2))]),
                            np.hstack([s[:, 1:], rng.normal(size=(n, 1))])), y, ("y",))
    c, worst_norm, steps = 0.3, 0.0, 0
    for spec in (ModelSpec("gmu"), ModelSpec("maxout_mlp"), ModelSpec("moe_untied")):
        def check(model):
            nonlocal worst_norm, steps
            steps += 1
            for p in model.parameters():
                if p.norm_axis is not None:
                    worst_norm = max(worst_norm, float(np.linalg.norm(p.value, axis=p.norm_axis).max()))
        cfg = HyperConfig(hidden_size=8, learning_rate=0.1, dropout=0.2, max_norm=c, init_range=0.5,
                          batch_size=16, max_epochs=3, batch_norm=True)
        train_model(spec, ds, None, cfg, check)
    norm_ok = steps > 0 and worst_norm <= c + 1e-9

    # batch-norm statistics on random batches; the variance bound needs unit spread >= 0.1
    # because eps / s**2 must stay below 1e-6
    bn_mean, bn_var = 0.0, 0.0
    for _ in range(500):
        m = int(rng.integers(8, 65))
        x = rng.normal(size=(m, 6)) * rng.uniform(0.1, 100.0, 6) + rng.uniform(-50, 50, 6)
        z = batch_norm_forward(x, np.ones(6), np.zeros(6)).normalized
        bn_mean = max(bn_mean, float(np.abs(z.mean(axis=0)).max()))
        bn_var = max(bn_var, float(np.abs(z.var(axis=0) - 1.0).max()))
    bn_ok = bn_mean < 1e-7 and bn_var < 1e-6

    # dropout
    x = rng.normal(size=(50, 20))
    eval_ok = dropout_forward(x, 0.5, mode="eval").tobytes() == x.tobytes()
    mc = float(dropout_forward(np.ones(10**6), 0.5, np.random.default_rng(1)).mean())
    drop_ok = eval_ok and abs(mc - 1.0) < 0.01

    record(6, norm_ok and bn_ok and drop_ok,
           f"max-norm worst {worst_norm:.6f} over {steps} steps (<= {c}); BN |mean| {bn_mean:.1e} |var-1| "
           f"{bn_var:.1e}; dropout eval identity {eval_ok}, MC mean {mc:.4f}")


def test_criterion_7_cli_determinism(tmp_path):
    root = cliruns.make_workspace(tmp_path / "ws")
    runs = {jobs: tmp_path / f"jobs{jobs}" for jobs in (1, 2, 3)}
    codes = {jobs: cliruns.run_all(root, out, jobs) for jobs, out in runs.items()}
    files = {jobs: cliruns.output_files(out) for jobs, out in runs.items()}
    again = tmp_path / "repeat"
    cliruns.run_all(root, again, 1)
    same = files[1] == files[2] == files[3] == cliruns.output_files(again)
    ok = same and all(v == 0 for c in codes.values() for v in c.values())
    record(7, ok, f"{len(codes[1])} commands x jobs 1/2/3 plus a repeat: "
                  f"{len(files[1])} files {'byte-identical' if same else 'DIFFER'}")


def test_criterion_8_grid_isolation():
    run = fit_synthetic(grid_params(seed=0))
    grid = export_activation_grid(run.gmu, [(-5.0, 8.0), (-5.0, 8.0)], 101)
    test = run.test_rows
    z, _ = grid.lookup(run.data.x_v[test, 0], run.data.x_t[test, 0])
    # z > 0.5 favours the visual branch, which suppresses textual noise (M = 1)
    frac = float(np.mean((z > 0.5) == (run.data.m[test] == 1)))
    record(8, frac >= 0.90, f"{frac:.3f} of {len(test)} held-out samples on the noise-suppressing side (>= 0.90)")
