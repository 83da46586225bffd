import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdpssp.core import MdpModel, expected_ipv
from mdpssp.errors import ConfigError, InfeasibleDedupError, SizeError
from mdpssp.planner import (
    PlannerConfig,
    beam_search_dedup_plan,
    beam_search_plan,
    brute_force_plan,
    greedy_dedup_plan,
    greedy_plan,
    perturb_model,
    plan_with,
    ssp_plan,
    ssp_plan_dedup,
)

from conftest import A, B, random_model


def enumerate_paths(model, dedup=False):
    """Every path with its value, via the closed-form objective."""
    T, K = model.reward.shape
    gen = itertools.permutations(range(K), T) if dedup else itertools.product(range(K), repeat=T)
    return {p: expected_ipv(model, p) for p in gen}


# -- worked example ---------------------------------------------------------


def test_worked_example_all_four_paths(worked_model):
    values = enumerate_paths(worked_model)
    expected = {(A, A): 0.70, (A, B): 0.64, (B, A): 0.75, (B, B): 0.63}
    for path, v in expected.items():
        assert values[path] == pytest.approx(v, abs=1e-12)


def test_ssp_on_worked_example(worked_model):
    plan, table = ssp_plan(worked_model)
    assert plan.path == (B, A)
    assert plan.expected_ipv == pytest.approx(0.75, abs=1e-12)
    assert table.values[0] == pytest.approx(0.75, abs=1e-12)
    assert table.values[-1] == 0.0
    assert table.argmax_actions == (B, A)


def test_greedy_on_worked_example(worked_model):
    plan = greedy_plan(worked_model)
    assert plan.path == (A, A)
    assert plan.expected_ipv == pytest.approx(0.70, abs=1e-12)


def test_beam_on_worked_example(worked_model):
    plan = beam_search_plan(worked_model, 2)
    assert plan.path == (B, A)
    assert plan.expected_ipv == pytest.approx(0.75, abs=1e-12)
    assert plan.beam_size == 2


def test_brute_force_on_worked_example(worked_model):
    plan = brute_force_plan(worked_model)
    assert plan.path == (B, A)
    assert plan.expected_ipv == pytest.approx(0.75, abs=1e-12)


# -- ssp --------------------------------------------------------------------


def test_certain_quit_reduces_to_per_step_argmax():
    rng = np.random.default_rng(1)
    model = MdpModel(rng.random((4, 5)), np.ones((4, 5)))
    plan, _ = ssp_plan(model)
    assert plan.path == tuple(model.reward.argmax(axis=1))
    assert plan.expected_ipv == pytest.approx(model.reward[0].max(), abs=1e-12)


def test_single_item_is_forced():
    rng = np.random.default_rng(2)
    model = MdpModel(rng.random((5, 1)), rng.random((5, 1)))
    for plan in (ssp_plan(model)[0], greedy_plan(model), beam_search_plan(model, 3), brute_force_plan(model)):
        assert plan.path == (0,) * 5
        assert plan.expected_ipv == pytest.approx(expected_ipv(model, [0] * 5), abs=1e-12)


@pytest.mark.parametrize("seed", range(200))
def test_ssp_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, int(rng.integers(1, 7)), int(rng.integers(1, 5)))
    assert ssp_plan(model)[0].expected_ipv == pytest.approx(
        brute_force_plan(model).expected_ipv, abs=1e-9
    )


def test_brute_force_helper_agrees_with_enumeration():
    rng = np.random.default_rng(11)
    model = random_model(rng, 4, 3)
    values = enumerate_paths(model)
    best = max(values.values())
    assert brute_force_plan(model).expected_ipv == pytest.approx(best, abs=1e-12)


def test_bellman_consistency():
    rng = np.random.default_rng(5)
    model = random_model(rng, 8, 6)
    _, table = ssp_plan(model)
    V, pi = table.values, table.argmax_actions
    T = model.horizon
    assert V[T - 1] == pytest.approx(model.reward[T - 1].max(), abs=1e-12)
    for t in range(T - 1):
        a = pi[t]
        assert V[t] == pytest.approx(model.reward[t, a] + (1 - model.quit[t, a]) * V[t + 1], abs=1e-12)
    assert all(v >= 0 for v in V)


def test_argmax_invariant_to_reward_scaling():
    rng = np.random.default_rng(8)
    model = random_model(rng, 6, 5)
    scaled = MdpModel(model.reward * 0.37, model.quit)
    assert ssp_plan(model)[1].argmax_actions == ssp_plan(scaled)[1].argmax_actions


# -- greedy / beam ----------------------------------------------------------


def test_greedy_matches_ssp_when_quit_is_item_independent():
    rng = np.random.default_rng(4)
    quit = np.repeat(rng.random((5, 1)), 4, axis=1)
    model = MdpModel(rng.random((5, 4)), quit)
    assert greedy_plan(model).path == ssp_plan(model)[0].path
    assert greedy_plan(model).expected_ipv == pytest.approx(ssp_plan(model)[0].expected_ipv, abs=1e-12)


def test_greedy_tie_break_lowest_index():
    model = MdpModel(np.full((3, 4), 0.4), np.tile([0.5, 0.1, 0.2, 0.3], (3, 1)))
    plan = greedy_plan(model)
    assert plan.path == (0, 0, 0)
    assert plan.expected_ipv == pytest.approx(0.4 * (1 + 0.5 + 0.25), abs=1e-12)


def test_beam_width_one_equals_greedy_on_distinct_rewards():
    rng = np.random.default_rng(6)
    model = random_model(rng, 6, 5)
    assert beam_search_plan(model, 1).path == greedy_plan(model).path


@pytest.mark.parametrize("seed", range(30))
def test_exhaustive_beam_equals_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    T, K = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    model = random_model(rng, T, K)
    beam = beam_search_plan(model, K**T)
    assert beam.expected_ipv == pytest.approx(brute_force_plan(model).expected_ipv, abs=1e-9)


def test_beam_ties_choose_lexicographically_smallest():
    model = MdpModel(np.full((2, 3), 0.5), np.full((2, 3), 0.5))
    assert beam_search_plan(model, 2).path == (0, 0)


def test_invalid_beam_size(worked_model):
    with pytest.raises(ConfigError):
        beam_search_plan(worked_model, 0)
    with pytest.raises(ConfigError):
        PlannerConfig(beam_size=0)


@st.composite
def models(draw, max_T=5, max_K=4):
    T = draw(st.integers(1, max_T))
    K = draw(st.integers(1, max_K))
    probs = st.floats(0.0, 1.0, allow_nan=False)
    return MdpModel(
        draw(arrays(np.float64, (T, K), elements=probs)),
        draw(arrays(np.float64, (T, K), elements=probs)),
    )


@settings(max_examples=200, deadline=None)
@given(models(), st.integers(1, 6))
def test_dominance(model, S):
    ssp = ssp_plan(model)[0].expected_ipv
    beam = beam_search_plan(model, S)
    assert ssp >= beam.expected_ipv - 1e-12
    assert beam.expected_ipv == pytest.approx(expected_ipv(model, beam.path), abs=1e-12)
    assert ssp >= greedy_plan(model).expected_ipv - 1e-12


# -- brute force guard ------------------------------------------------------


def test_brute_force_size_guard():
    model = MdpModel(np.full((11, 4), 0.5), np.full((11, 4), 0.5))  # 4**11 > 1e6
    with pytest.raises(SizeError):
        brute_force_plan(model)


# -- dedup ------------------------------------------------------------------


def test_greedy_dedup_forced_exclusion():
    model = MdpModel([[0.9, 0.1], [0.9, 0.1]], [[0.5, 0.5], [0.5, 0.5]])
    assert greedy_dedup_plan(model).path == (A, B)


def test_ssp_dedup_when_one_item_dominates():
    # item 0 is best at both steps; T=2, K=3
    model = MdpModel([[0.9, 0.5, 0.3], [0.9, 0.2, 0.4]], [[0.1, 0.3, 0.3], [0.5, 0.5, 0.5]])
    plan = ssp_plan_dedup(model)
    assert plan.path.count(0) == 1
    assert len(set(plan.path)) == 2
    # the injective optimum by enumeration
    values = enumerate_paths(model, dedup=True)
    best = max(values, key=values.get)
    assert best == (0, 2)
    assert plan.path == best


def test_ssp_dedup_symmetric_items_match_dedup_brute_force():
    model = MdpModel(np.full((3, 4), 0.3), np.full((3, 4), 0.4))
    plan = ssp_plan_dedup(model)
    assert len(set(plan.path)) == 3
    assert plan.expected_ipv == pytest.approx(brute_force_plan(model, dedup=True).expected_ipv, abs=1e-12)


def test_ssp_dedup_beats_greedy_dedup_on_average():
    rng = np.random.default_rng(7)
    ssp_vals, greedy_vals = [], []
    for _ in range(200):
        model = random_model(rng, 3, 5)
        ssp_vals.append(ssp_plan_dedup(model).expected_ipv)
        greedy_vals.append(greedy_dedup_plan(model).expected_ipv)
    assert np.mean(ssp_vals) > np.mean(greedy_vals)


def test_ssp_dedup_falls_back_when_candidates_run_out():
    # every step ranks items 0,1 on top, so step 3 exhausts its top-3 list only
    # if earlier steps consumed it; T=3 keeps 3 candidates, K=4 allows a fallback
    reward = np.array([[0.9, 0.8, 0.7, 0.0], [0.9, 0.8, 0.7, 0.0], [0.9, 0.8, 0.7, 0.1]])
    model = MdpModel(reward, np.full((3, 4), 0.5))
    plan = ssp_plan_dedup(model)
    assert sorted(plan.path) == [0, 1, 2]


@pytest.mark.parametrize("seed", range(200))
def test_dedup_plans_are_injective(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 6))
    model = random_model(rng, T, T + int(rng.integers(0, 4)))
    for plan in (ssp_plan_dedup(model), greedy_dedup_plan(model), beam_search_dedup_plan(model, 3)):
        assert len(set(plan.path)) == len(plan.path) == T


@pytest.mark.parametrize("seed", range(20))
def test_exhaustive_dedup_beam_equals_dedup_brute_force(seed):
    rng = np.random.default_rng(300 + seed)
    T = int(rng.integers(1, 4))
    K = T + int(rng.integers(0, 3))
    model = random_model(rng, T, K)
    n_injective = len(list(itertools.permutations(range(K), T)))
    beam = beam_search_dedup_plan(model, n_injective)
    assert beam.expected_ipv == pytest.approx(brute_force_plan(model, dedup=True).expected_ipv, abs=1e-9)


@pytest.mark.parametrize("planner", [ssp_plan_dedup, greedy_dedup_plan, lambda m: beam_search_dedup_plan(m, 2)])
def test_dedup_infeasible(planner):
    model = MdpModel(np.full((3, 2), 0.5), np.full((3, 2), 0.5))
    with pytest.raises(InfeasibleDedupError):
        planner(model)


# -- noise ------------------------------------------------------------------


def test_perturb_zero_is_identity(worked_model):
    noisy = perturb_model(worked_model, 0, seed=1)
    assert noisy == worked_model
    assert noisy is not worked_model


def test_perturb_range_and_determinism():
    rng = np.random.default_rng(9)
    model = MdpModel(rng.uniform(0.3, 0.7, (20, 30)), rng.uniform(0.3, 0.7, (20, 30)))
    noisy = perturb_model(model, 10, seed=4)
    assert np.all(np.abs(noisy.reward - model.reward) <= 0.2 + 1e-12)
    assert np.all(np.abs(noisy.quit - model.quit) <= 0.2 + 1e-12)
    assert not np.array_equal(noisy.reward, model.reward)
    assert perturb_model(model, 10, seed=4) == noisy


def test_perturb_clamps():
    model = MdpModel(np.full((50, 50), 0.99), np.full((50, 50), 0.01))
    noisy = perturb_model(model, 3, seed=0)
    assert noisy.reward.max() == 1.0
    assert noisy.quit.min() == 0.0
    assert 0.0 <= noisy.reward.min() and noisy.quit.max() <= 1.0


@pytest.mark.parametrize("m", [-1, 11])
def test_perturb_rejects_level(worked_model, m):
    with pytest.raises(ConfigError):
        perturb_model(worked_model, m, seed=0)


def test_plan_with_dispatch(worked_model):
    assert plan_with(worked_model, "ssp").path == (B, A)
    assert plan_with(worked_model, "greedy").path == (A, A)
    assert plan_with(worked_model, "beam", PlannerConfig(beam_size=2)).path == (B, A)
    assert plan_with(worked_model, "greedy", PlannerConfig(dedup=True)).path == (A, B)
    with pytest.raises(ConfigError):
        plan_with(worked_model, "random")
