"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are printed together
at the end of the pytest run (see ``conftest.py``) and also when this file
is executed directly with ``python tests/test_acceptance.py``.
"""

import json
import math
import time

import numpy as np
import pytest

from hazardnav import conformal as cf
from hazardnav import synth
from hazardnav.cli import main
from hazardnav.env import Action, NavEnv, NavWorld
from hazardnav.experiment import ExperimentConfig, read_runs, run_experiment
from hazardnav.hazardmap import threshold_mask
from hazardnav.metrics import instance_metrics, pixel_metrics

from oracles import confusion_metrics, match_instances, random_cal_set, scan_crc

RESULTS: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def _check(number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


# Navigation protocol shared by criteria 6, 7 and 8. The scorer keeps the
# under-covering bias of -1.5; the world and scorer widths were fixed before
# the acceptance runs and are listed in the README.
NAV_CONFIG = {
    "seed": 2024,
    "dataset": {
        "world": {"hazard_kind": "CRATERS", "n_blobs_range": [5, 10], "blob_radius_range": [2, 4],
                  "target_hazard_frac_range": [0.1, 0.25]},
        "scorer": {"boundary_softness": 2.0, "noise_sigma": 0.5, "miss_bias": -1.5, "mc_jitter_sigma": 1.0},
        "counts": {"TRAIN": 0, "CAL": 200, "TEST": 3},
        "K": 8,
    },
    "methods": ["BASELINE", "MC", "CRC", "MCCP"],
    "alpha": 0.05,
    "grid": 1000,
    "agent": {"total_steps": 200_000},
    "envs": {"n_worlds": 3, "horizon": 1000},
    "seeds": [0, 1, 2, 3, 4],
    "window": 25,
    "eval_episodes": 0,
}


# -- 1. coverage guarantee ---------------------------------------------------


def test_criterion_1_coverage_guarantee():
    t0 = time.perf_counter()
    cfg, scfg = synth.WorldConfig(), synth.ScorerConfig()
    per_alpha = {a: [] for a in (0.1, 0.3, 0.5)}
    for seed in range(5):
        items = synth.generate_items(cfg, scfg, {"CAL": 200, "TEST": 500}, 0, seed)
        cal = [(it.scores, it.mask) for it in items if it.split is synth.Split.CAL]
        test = [(it.scores, it.mask) for it in items if it.split is synth.Split.TEST]
        for alpha in per_alpha:
            lam = cf.calibrate_crc(cal, alpha)
            per_alpha[alpha].append(float(np.mean([cf.fnr_loss(threshold_mask(s, lam), t) for s, t in test])))
    elapsed = time.perf_counter() - t0
    ok = elapsed < 120
    parts = []
    for alpha, risks in per_alpha.items():
        grand = sum(risks) / len(risks)
        ok &= all(r <= alpha + 0.02 for r in risks) and grand <= alpha
        parts.append(f"alpha={alpha}: max seed FNR {max(risks):.4f}, grand mean {grand:.4f}")
    _check(1, ok, "; ".join(parts) + f"; {elapsed:.1f}s")


# -- 2. lambda-hat oracle ------------------------------------------------------


def test_criterion_2_lambda_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(1, 11))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        items = random_cal_set(rng, n, h, w, p=float(rng.uniform(0.1, 0.6)))
        alpha = float(rng.uniform(1.0 / (n + 1), 0.95))
        if cf.calibrate_crc(items, alpha, grid=100) != scan_crc(items, alpha, 100):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    _check(2, mismatches == 0 and elapsed < 10, f"{mismatches} mismatches in 50 sets; {elapsed:.2f}s")


# -- 3. nestedness and monotone risk ------------------------------------------


def test_criterion_3_property_suites():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    nest_bad = mono_bad = 0
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 13, size=2))
        scores = rng.random((h, w))
        if rng.random() < 0.3:
            scores = np.round(scores, 1)  # ties
        lo, hi = sorted(rng.random(2))
        if (threshold_mask(scores, lo) & ~threshold_mask(scores, hi)).any():
            nest_bad += 1
    for _ in range(1000):
        items = random_cal_set(rng, int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        lams = np.sort(rng.random(6))
        risks = [cf.empirical_risk(items, float(lam)) for lam in lams]
        if any(b > a for a, b in zip(risks, risks[1:])):
            mono_bad += 1
    elapsed = time.perf_counter() - t0
    ok = nest_bad == 0 and mono_bad == 0 and elapsed < 10
    _check(3, ok, f"nestedness violations {nest_bad}/1000, monotonicity violations {mono_bad}/1000; {elapsed:.2f}s")


# -- 4. reward unit contract ---------------------------------------------------


def test_criterion_4_rewards():
    t0 = time.perf_counter()
    plan = np.zeros((6, 8), bool)
    plan[1, 2] = True
    world = NavWorld(np.zeros((6, 8), bool), plan, (2, 2), (2, 4))
    env = NavEnv(world)
    env.reset()
    hazard = env.step(Action.UP)[1]
    env.reset()
    closer = env.step(Action.RIGHT)[1]
    _, goal, done, _ = env.step(Action.RIGHT)
    corner = NavEnv(NavWorld(np.zeros((6, 8), bool), plan, (0, 0), (5, 7)))
    corner.reset()
    noop = corner.step(Action.LEFT)[1]
    got = (hazard, closer, goal, noop)
    elapsed = time.perf_counter() - t0
    ok = got == (-1.05, 0.95, 50.95, -0.05) and done and elapsed < 1
    _check(4, ok, f"rewards {got}, goal done={done}; {elapsed * 1000:.1f}ms")


# -- 5. metric oracles ---------------------------------------------------------


def _same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def test_criterion_5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        truth = rng.random((h, w)) < rng.random()
        pred = rng.random((h, w)) < rng.random()
        pm = pixel_metrics(pred, truth)
        exact = all(_same(a, b) for a, b in zip((pm.precision, pm.coverage, pm.f1, pm.iou),
                                                 confusion_metrics(pred, truth)))
        im = instance_metrics(pred, truth)
        ip, ic = match_instances(pred, truth)
        if not (exact and _same(im.precision, ip) and _same(im.coverage, ic)):
            bad += 1
    elapsed = time.perf_counter() - t0
    _check(5, bad == 0 and elapsed < 10, f"{bad} disagreements on 200 grids; {elapsed:.2f}s")


# -- 6-8. navigation ------------------------------------------------------------


def _nav(tmp_path_factory, noise: bool):
    cfg = dict(NAV_CONFIG)
    if noise:
        cfg["noise"] = {"sigma": 1.0, "p": 1.0, "enabled": True}
    out = tmp_path_factory.mktemp("nav_noisy" if noise else "nav_clean") / "results"
    t0 = time.perf_counter()
    run_experiment(ExperimentConfig.from_dict(cfg), out)
    return read_runs(out / "runs.csv"), time.perf_counter() - t0


@pytest.fixture(scope="module")
def clean_runs(tmp_path_factory):
    return _nav(tmp_path_factory, noise=False)


@pytest.fixture(scope="module")
def noisy_runs(tmp_path_factory):
    return _nav(tmp_path_factory, noise=True)


def _mean(runs, method, metric):
    vals = [r[metric] for r in runs if r["method"] == method]
    return sum(vals) / len(vals)


def test_criterion_6_learnability(clean_runs):
    runs, elapsed = clean_runs
    first = [r for r in runs if r["seed"] == NAV_CONFIG["seeds"][0]]
    worst = {m: min(r["success_rate"] for r in first if r["method"] == m) for m in NAV_CONFIG["methods"]}
    # the shared experiment also trains four more seeds; count its runtime pro rata
    share = elapsed / len(NAV_CONFIG["seeds"])
    ok = all(v >= 0.95 for v in worst.values()) and share < 600
    detail = ", ".join(f"{m} min {v:.2f}" for m, v in worst.items())
    _check(6, ok, f"final-window success over 3 worlds: {detail}; ~{share:.0f}s")


def _ordering(runs, relax: float):
    base_gt = _mean(runs, "BASELINE", "frac_time_in_gt_hazard")
    base_rim = _mean(runs, "BASELINE", "mean_gt_rim_dist")
    crc_gt = _mean(runs, "CRC", "frac_time_in_gt_hazard")
    mccp_gt = _mean(runs, "MCCP", "frac_time_in_gt_hazard")
    mccp_rim = _mean(runs, "MCCP", "mean_gt_rim_dist")
    checks = (
        crc_gt <= 0.7 * relax * base_gt,
        mccp_gt <= 0.5 * relax * base_gt,
        mccp_rim >= 1.25 / relax * base_rim,
    )
    detail = (f"hazard time CRC/BASE {crc_gt / base_gt:.2f} (bar {0.7 * relax:.2f}), "
              f"MCCP/BASE {mccp_gt / base_gt:.2f} (bar {0.5 * relax:.2f}); "
              f"clearance MCCP/BASE {mccp_rim / base_rim:.2f} (bar {1.25 / relax:.3f})")
    return all(checks), detail


def test_criterion_7_safety_ordering(clean_runs):
    runs, elapsed = clean_runs
    ok, detail = _ordering(runs, 1.0)
    _check(7, ok and elapsed < 900, f"{detail}; {elapsed:.0f}s")


def test_criterion_8_noise_robustness(noisy_runs):
    runs, elapsed = noisy_runs
    ok, detail = _ordering(runs, 1.1)
    _check(8, ok and elapsed < 900, f"noise sigma=1.0 p=1.0: {detail}; {elapsed:.0f}s")


# -- 9. determinism ----------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    cfg = {"seed": 9, "dataset": {"counts": {"CAL": 20, "TEST": 2}, "K": 4}, "alpha": 0.2,
           "agent": {"total_steps": 5000}, "envs": {"n_worlds": 2}, "seeds": [0, 1], "window": 5}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["experiment", "--config", str(path), "--out", str(tmp_path / f"run{i}")]) for i in (1, 2)]
    a = (tmp_path / "run1" / "summary.csv").read_bytes()
    b = (tmp_path / "run2" / "summary.csv").read_bytes()
    _check(9, codes == [0, 0] and a == b, f"exit codes {codes}, summary tables identical: {a == b}")


if __name__ == "__main__":
    import sys

    code = pytest.main([__file__, "-q"])
    sys.exit(code)
