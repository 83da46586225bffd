"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the summary printed at the end
lists every criterion with the measured values.
"""
import time

import numpy as np
import pytest
from scipy import special

from mdpssp.config import RunConfig
from mdpssp.cli import run_pipeline
from mdpssp.core import expected_bl, expected_ipv
from mdpssp.evaluation import run_noise_sweep, run_offline_comparison
from mdpssp.models import apply_platt, bag_level_auc, binned_calibration_rmse, fit_platt
from mdpssp.planner import (
    beam_search_plan,
    brute_force_plan,
    greedy_plan,
    ssp_plan,
)
from mdpssp.simulator import SimConfig, generate_ground_truth, generate_users, produce_mdp, rollouts

from conftest import ACCEPTANCE_RESULTS, A, B, random_model


def record(key, passed, detail):
    ACCEPTANCE_RESULTS[key] = (bool(passed), detail)
    assert passed, detail


@pytest.fixture(scope="module")
def world():
    cfg = SimConfig()  # rho 0.2, seed 7
    gt = generate_ground_truth(cfg)
    users = generate_users(cfg, first_index=cfg.num_users)
    return cfg, gt, users


@pytest.fixture(scope="module")
def comparison(world):
    _, gt, users = world
    start = time.perf_counter()
    rows, failures = run_offline_comparison(gt, users, gt, horizons=(20, 50))
    elapsed = time.perf_counter() - start
    return {(r["strategy"], r["horizon"]): r for r in rows}, failures, elapsed


def test_criterion_1_dp_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_gap = worst_bellman = 0.0
    for _ in range(200):
        model = random_model(rng, int(rng.integers(2, 7)), int(rng.integers(2, 5)))
        plan, table = ssp_plan(model)
        worst_gap = max(worst_gap, abs(plan.expected_ipv - brute_force_plan(model).expected_ipv))
        V, pi, T = table.values, table.argmax_actions, model.horizon
        # V(s_T) = max R[T]; V(s_t) = max_a R[t,a] + (1 - quit[t,a]) V(s_{t+1})
        residuals = [abs(V[T - 1] - model.reward[T - 1].max())]
        for t in range(T - 1):
            q = model.reward[t] + model.cont[t] * V[t + 1]
            residuals += [abs(V[t] - q.max()), abs(q[pi[t]] - q.max())]
        worst_bellman = max(worst_bellman, max(residuals))
    elapsed = time.perf_counter() - start
    record(
        "1",
        worst_gap <= 1e-9 and worst_bellman <= 1e-9 and elapsed < 10,
        f"max |ssp - brute| = {worst_gap:.1e}, max Bellman residual = {worst_bellman:.1e}, {elapsed:.2f}s",
    )


def test_criterion_2_strategy_dominance(worked_model):
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(200):
        model = random_model(rng, int(rng.integers(1, 9)), int(rng.integers(1, 7)))
        ssp = ssp_plan(model)[0].expected_ipv
        for S in (1, 2, 3, 5):
            beam = beam_search_plan(model, S)
            violations += ssp < beam.expected_ipv - 1e-12
            violations += abs(beam.expected_ipv - expected_ipv(model, beam.path)) > 1e-12
        violations += ssp < greedy_plan(model).expected_ipv - 1e-12
    ssp_w, greedy_w = ssp_plan(worked_model)[0], greedy_plan(worked_model)
    exact = (
        ssp_w.path == (B, A) and abs(ssp_w.expected_ipv - 0.75) <= 1e-12
        and greedy_w.path == (A, A) and abs(greedy_w.expected_ipv - 0.70) <= 1e-12
    )
    record(
        "2",
        violations == 0 and exact,
        f"{violations} dominance violations over 200 models; worked example SSP {ssp_w.expected_ipv:.4f} vs Greedy {greedy_w.expected_ipv:.4f}",
    )


def test_criterion_3_offline_comparison(comparison):
    rows, failures, elapsed = comparison
    checks, parts = [not failures, elapsed < 120], []
    advantage = {}
    for T in (20, 50):
        ssp, beam, greedy = (rows[(s, T)] for s in ("ssp", "beam", "greedy"))
        gap_sb = ssp["ipv_mean"] / beam["ipv_mean"] - 1
        gap_bg = beam["ipv_mean"] / greedy["ipv_mean"] - 1
        advantage[T] = ssp["ipv_mean"] / greedy["ipv_mean"] - 1
        checks += [gap_sb >= 0.02, gap_bg >= 0.02, greedy["ctr"] > ssp["ctr"]]
        parts.append(
            f"T={T}: IPV SSP {ssp['ipv_mean']:.3f} > Beam {beam['ipv_mean']:.3f} (+{gap_sb:.1%}) "
            f"> Greedy {greedy['ipv_mean']:.3f} (+{gap_bg:.1%}); CTR Greedy {greedy['ctr']:.3f} > SSP {ssp['ctr']:.3f}"
        )
    checks.append(advantage[50] > advantage[20])
    parts.append(f"SSP advantage over Greedy {advantage[20]:.1%} at T=20 < {advantage[50]:.1%} at T=50; {elapsed:.1f}s")
    record("3", all(checks), "; ".join(parts))


def test_criterion_4_dedup(world):
    _, gt, users = world
    rows, failures = run_offline_comparison(gt, users, gt, horizons=(20, 50), dedup=True)
    rows = {(r["strategy"], r["horizon"]): r for r in rows}
    injective = all(r["all_paths_injective"] for r in rows.values())
    gaps = {T: rows[("ssp", T)]["ipv_mean"] / rows[("greedy", T)]["ipv_mean"] - 1 for T in (20, 50)}
    record(
        "4",
        injective and not failures and all(g >= 0.02 for g in gaps.values()),
        f"all paths injective: {injective}; SSP-dedup over Greedy-dedup +{gaps[20]:.1%} (T=20), +{gaps[50]:.1%} (T=50)",
    )


def test_criterion_5_noise_robustness(world, comparison):
    cfg, gt, users = world
    rows = comparison[0]
    curves = run_noise_sweep(gt, users, horizon=20, levels=range(11), seed=cfg.seed)
    ssp, greedy = curves["ssp"], curves["greedy"]
    matches = ssp[0] == rows[("ssp", 20)]["ipv_mean"]
    dominates = all(s >= g for s, g in zip(ssp, greedy))
    record(
        "5",
        matches and dominates and ssp[10] < ssp[0],
        f"SSP m=0 {ssp[0]:.4f} equals comparison: {matches}; SSP >= Greedy at all m: {dominates} "
        f"(min margin {min(s - g for s, g in zip(ssp, greedy)):.3f}); SSP m=10 {ssp[10]:.4f} < m=0",
    )


def test_criterion_6_mil_benefit(planted_fit):
    train, held_out, fit, baseline = planted_fit
    bags = [b for s in held_out for b in s.bags]
    mil_auc, base_auc = bag_level_auc(fit.model, bags), bag_level_auc(baseline, bags)
    record(
        "6",
        len(train) >= 2000 and mil_auc >= base_auc + 0.01 and fit.converged and fit.iterations <= 50,
        f"held-out bag AUC MIL {mil_auc:.4f} vs no-MIL {base_auc:.4f} (+{mil_auc - base_auc:.4f}); "
        f"converged in {fit.iterations} outer iterations on {len(train)} sessions",
    )


def test_criterion_7_calibration_benefit():
    rng = np.random.default_rng(7)
    n = 10_000
    f_fit, f_test = rng.normal(size=n), rng.normal(size=n)
    # raw scores rank correctly but are far too timid and shifted
    truth = lambda f: special.expit(3.0 * f - 1.0)
    y_fit, y_test = rng.random(n) < truth(f_fit), rng.random(n) < truth(f_test)
    before = binned_calibration_rmse(special.expit(f_test), y_test)
    after = binned_calibration_rmse(apply_platt(fit_platt(f_fit, y_fit), f_test), y_test)
    record("7", after <= 0.5 * before, f"binned RMSE before {before:.4f}, after {after:.4f} (ratio {after / before:.3f})")


def test_criterion_8_monte_carlo(world):
    _, gt, users = world
    user = users[0]
    model = produce_mdp(gt, user, gt, 20)
    plan = ssp_plan(model)[0]
    n = 100_000
    ipv, bl = rollouts(gt, user.candidates[np.asarray(plan.path)], user, n, seed=7)
    z = {}
    for name, sample, exact in (("ipv", ipv, expected_ipv(model, plan.path)), ("bl", bl, expected_bl(model, plan.path))):
        z[name] = (sample.mean() - exact) / (sample.std(ddof=1) / np.sqrt(n))
    record(
        "8",
        all(abs(v) <= 3 for v in z.values()),
        f"rollout mean IPV {ipv.mean():.4f} vs {expected_ipv(model, plan.path):.4f} (z={z['ipv']:+.2f}); "
        f"BL {bl.mean():.4f} vs {expected_bl(model, plan.path):.4f} (z={z['bl']:+.2f})",
    )


def _best_time(model, repeats=20):
    ssp_plan(model)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        ssp_plan(model)
        best = min(best, time.perf_counter() - start)
    return best


def test_criterion_9_complexity():
    rng = np.random.default_rng(7)
    small, large = random_model(rng, 100, 1000), random_model(rng, 200, 2000)
    t_small, t_large = _best_time(small), _best_time(large)
    ratio = t_large / t_small
    record("9", ratio <= 4.0, f"ssp_plan {t_small * 1e3:.1f} ms at (100,1000), {t_large * 1e3:.1f} ms at (200,2000); ratio {ratio:.2f}")


def test_criterion_10_determinism(tmp_path):
    cfg = RunConfig()
    outs = [tmp_path / "first", tmp_path / "second"]
    for out in outs:
        run_pipeline(cfg, out)
    names = sorted(p.name for p in outs[0].iterdir())
    same = names == sorted(p.name for p in outs[1].iterdir())
    differing = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    record("10", same and not differing and "report.json" in names, f"{len(names)} artifacts compared, {len(differing)} differ {differing}")
