"""Exit criteria, one test per criterion, each printing a PASS/FAIL line."""
import json
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from xmodal.active import Pool, SimulatedOracle, pool_update, predictive_entropy
from xmodal.cli import selftest_checks
from xmodal.distill import KdConfig, ModelBundle, encode, head_outputs
from xmodal.gradcheck import CHECKS, summarize, timed_gradcheck
from xmodal.harness import ExperimentConfig, run, run_kd
from xmodal.metrics import classification_report, regression_report
from xmodal.numcore import RandomStream

from test_metrics import brute_ccc, brute_macro_f1, brute_pcc, brute_rmse

SEEDS = list(range(10))


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{name}] {detail}")
        assert ok, detail

    return report


def test_gradient_suite(verdict):
    results, elapsed = timed_gradcheck(instances_per_check=10, seed=0)
    s = summarize(results)
    ok = s["instances"] >= 100 and s["max_error"] < 1e-4 and elapsed < 60 and set(s["per_check"]) == set(CHECKS)
    verdict("gradient suite", ok,
            f"{s['instances']} instances over {len(s['per_check'])} losses, "
            f"max rel error {s['max_error']:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_closed_form_identities(verdict):
    rows = selftest_checks()
    p = np.random.default_rng(0).dirichlet(np.ones(5), size=200)
    u = predictive_entropy(p)
    bounds_err = max(0.0, float(-u.min()), float(u.max() - math.log(5)))
    rows.append(("entropy within [0, ln C]", bounds_err <= 1e-9, bounds_err))
    worst = max(err for _, _, err in rows)
    failed = [name for name, ok, _ in rows if not ok]
    verdict("closed-form identities", not failed and worst <= 1e-9,
            f"{len(rows)} identities, worst abs error {worst:.1e} (<= 1e-9)" + (f", failed {failed}" if failed else ""))


def test_self_injection(verdict):
    checked, mismatched = 0, []
    for l in (0, 1, 2):
        for seed in range(3):
            config = KdConfig(injection_layer=l)
            bundle = ModelBundle.create(16, 16, "dec", 3, config, RandomStream(seed))
            x_t = np.random.default_rng(seed).normal(size=(20, 16))
            _, f_t, _ = encode(bundle.teacher_encoder, x_t)
            act = bundle.teacher_head.forward(f_t).acts[l]
            out = head_outputs(bundle, act, f_t, l)
            checked += 1
            if not np.array_equal(out.y_t_given_s, out.y_t):
                mismatched.append((l, seed))
    verdict("self-injection identity", not mismatched,
            f"{checked} layer/seed cases bitwise identical" if not mismatched else f"mismatch at {mismatched}")


def test_metric_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        p, t = rng.normal(size=n) * rng.uniform(0.1, 5), rng.normal(size=n) + rng.uniform(-2, 2)
        rep = regression_report(p, t)
        pl, tl = p.tolist(), t.tolist()
        worst = max(worst, abs(rep.rmse - brute_rmse(pl, tl)), abs(rep.pcc - brute_pcc(pl, tl)),
                    abs(rep.ccc - brute_ccc(pl, tl)))
        c = int(rng.integers(2, 6))
        pred, truth = rng.integers(0, c, size=n), rng.integers(0, c, size=n)
        worst = max(worst, abs(classification_report(pred, truth, c).macro_f1
                               - brute_macro_f1(pred.tolist(), truth.tolist(), c)))
    verdict("metric oracle equivalence", worst <= 1e-10,
            f"1000 random vector pairs, worst |diff| {worst:.1e} (<= 1e-10)")


def test_label_efficiency_direction(verdict):
    start = time.perf_counter()
    art = run(ExperimentConfig(mode="label-efficiency", seeds=tuple(SEEDS)))
    elapsed = time.perf_counter() - start
    unc = art.summary["uncertainty"]["0.5"]["mean"]
    rnd = art.summary["random"]["0.5"]["mean"]
    sub = art.summary["no_al_random_subset"]["0.5"]["mean"]
    ok = unc >= rnd and unc >= sub and elapsed < 300
    verdict("label-efficiency direction", ok,
            f"50% budget: uncertainty {unc:.4f} vs random {rnd:.4f} and No-AL subset {sub:.4f}, "
            f"{elapsed:.0f}s (< 300s)")


def test_uncertainty_evolution(verdict):
    art = run(ExperimentConfig(mode="al", seeds=tuple(SEEDS)))
    first, last = [], []
    for seed in SEEDS:
        series = [r["mean_pool_entropy"] for r in art.rows if r["seed"] == seed]
        first.append(series[0])
        last.append(series[-1])
    f, l = float(np.mean(first)), float(np.mean(last))
    verdict("uncertainty evolution", l < 0.5 * f,
            f"10-seed mean pool entropy first round {f:.4f}, final round {l:.4f}, ratio {l / f:.3f} (< 0.5)")


def test_ablation_direction(verdict):
    base = ExperimentConfig(mode="kd", seeds=tuple(SEEDS))
    base = replace(base, data=replace(base.data, synth=replace(base.data.synth, label_flip_rate=0.3)))
    full = run_kd(base, weights=(1.0, 1.0, 1.0, 1.0))
    task = run_kd(base, weights=(0.0, 0.0, 0.0, 1.0))
    f, t = full.summary["accuracy"]["mean"], task.summary["accuracy"]["mean"]
    verdict("ablation direction", f - t > 0,
            f"30% label noise, 10 seeds: full {f:.4f} vs task-only {t:.4f}, margin {f - t:+.4f} (> 0)")


def test_pool_invariants_fuzz(verdict):
    rng = np.random.default_rng(7)
    n = int(rng.integers(20, 200))
    oracle = SimulatedOracle(rng.integers(0, 3, size=n))
    pool = Pool(np.arange(0), np.arange(n))
    violations = 0
    for _ in range(1000):
        if pool.unlabeled.size == 0:
            n = int(rng.integers(20, 200))
            oracle = SimulatedOracle(rng.integers(0, 3, size=n))
            start = rng.permutation(n)[: int(rng.integers(0, n // 2))]
            pool = Pool(start, np.setdiff1d(np.arange(n), start), labels={int(i): 0 for i in start})
        k = int(rng.integers(0, pool.unlabeled.size + 1))
        q = rng.choice(pool.unlabeled, size=k, replace=False)
        before = pool.size
        pool = pool_update(pool, q, oracle)
        pool.check()
        union = np.union1d(pool.labeled, pool.unlabeled)
        if (np.intersect1d(pool.labeled, pool.unlabeled).size or pool.size != before
                or not np.array_equal(union, np.arange(n)) or not np.isin(q, pool.labeled).all()):
            violations += 1
    verdict("pool invariants", violations == 0, f"1000 fuzz rounds, {violations} violations")


DETERMINISM_CONFIG = {
    "seeds": [0, 1],
    "data": {"synth": {"n": 120}},
    "optimizer": {"epochs": 5, "teacher_epochs": 5, "patience": 3},
    "model": {"hidden": 8, "embed_dim": 4},
    "acquisition": {"ratio": 0.2, "rounds": 2},
    "budgets": [0.3, 0.5, 1.0],
}


def _run_cli(args, out):
    proc = subprocess.run([sys.executable, "-m", "xmodal.cli", *args, "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_cli_determinism(verdict, tmp_path):
    commands = {"gradcheck": ["gradcheck", "--instances", "1"], "selftest": ["selftest"]}
    for mode in ("kd", "al", "ablation", "label-efficiency"):
        cfg = tmp_path / f"{mode}.json"
        cfg.write_text(json.dumps({"mode": mode, **DETERMINISM_CONFIG}))
        commands[mode] = [mode, "--config", str(cfg)]
    differing = []
    for name, args in commands.items():
        a = _run_cli(args, tmp_path / f"{name}_a")
        b = _run_cli(args, tmp_path / f"{name}_b")
        if not a or a != b:
            differing.append(name)
    verdict("determinism", not differing,
            f"{len(commands)} subcommands run twice, outputs byte-identical"
            if not differing else f"outputs differ for {differing}")
