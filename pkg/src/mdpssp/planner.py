"""Path planners over a personalized :class:`~mdpssp.core.MdpModel`.

``ssp_plan`` is the exact optimum of expected cumulative clicks, found by
backward induction from the absorbing state in O(T*K).  Greedy and beam
search are the baselines; the ``*_dedup`` variants forbid showing an item
twice.  ``brute_force_plan`` enumerates every path and exists to check the
others.

Ties are broken towards the lowest item index (beam search: the
lexicographically smallest path) so every planner is deterministic.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import MdpModel, Plan, StateValueTable, make_plan
from .errors import ConfigError, InfeasibleDedupError, InvalidModelError, SizeError

__all__ = [
    "PlannerConfig",
    "STRATEGIES",
    "ssp_values",
    "ssp_plan",
    "greedy_plan",
    "beam_search_plan",
    "brute_force_plan",
    "ssp_plan_dedup",
    "greedy_dedup_plan",
    "beam_search_dedup_plan",
    "perturb_model",
    "plan_with",
]

BRUTE_FORCE_LIMIT = 10**6
STRATEGIES = ("ssp", "greedy", "beam")


@dataclass(frozen=True)
class PlannerConfig:
    beam_size: int = 5
    dedup: bool = False

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")


def _check_model(model: MdpModel) -> None:
    if model.horizon == 0 or model.num_items == 0:
        raise InvalidModelError("empty model")


def _check_dedup(model: MdpModel) -> None:
    if model.num_items < model.horizon:
        raise InfeasibleDedupError(
            f"dedup needs at least T={model.horizon} items, model has {model.num_items}"
        )


def ssp_values(model: MdpModel) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction.

    Returns ``(values, q)`` where ``values`` has length T+1 (the last entry is
    the absorbing state, always 0) and ``q[t, a]`` is the value of showing
    ``a`` at step ``t`` and acting optimally afterwards.
    """
    values, q, _ = _backward(model)
    return values, q


def _backward(model: MdpModel) -> tuple[np.ndarray, np.ndarray, list[int]]:
    # One row at a time, in place: large models stay cache-friendly and the
    # cost grows linearly in T*K.
    _check_model(model)
    T, K = model.reward.shape
    values = np.zeros(T + 1)
    q = np.empty((T, K))
    policy = [0] * T
    for t in range(T - 1, -1, -1):
        v = values[t + 1]  # 0 after the last step, which ends the session
        row = q[t]
        # R + (1 - quit) * v
        np.multiply(model.quit[t], -v, out=row)
        row += v
        row += model.reward[t]
        # np.argmax returns the first maximum, i.e. the lowest item index
        a = int(row.argmax())
        policy[t] = a
        values[t] = row[a]
    return values, q, policy


def ssp_plan(model: MdpModel) -> tuple[Plan, StateValueTable]:
    values, _, policy = _backward(model)
    policy = tuple(policy)
    table = StateValueTable(tuple(float(v) for v in values), policy)
    return make_plan(model, policy, "ssp"), table


def greedy_plan(model: MdpModel) -> Plan:
    _check_model(model)
    return make_plan(model, model.reward.argmax(axis=1), "greedy")


def _beam(model: MdpModel, beam_size: int, dedup: bool) -> list[int]:
    T, K = model.reward.shape
    cont = model.cont
    paths: list[tuple[int, ...]] = [()]
    ipv = np.zeros(1)
    surv = np.ones(1)
    for t in range(T):
        scores = ipv[:, None] + surv[:, None] * model.reward[t][None, :]
        if dedup:
            for i, p in enumerate(paths):
                scores[i, list(p)] = -np.inf
        # rank parents lexicographically so (parent rank, item) orders children
        lex_rank = np.empty(len(paths), dtype=np.int64)
        lex_rank[sorted(range(len(paths)), key=paths.__getitem__)] = np.arange(len(paths))
        parent, item = np.meshgrid(np.arange(len(paths)), np.arange(K), indexing="ij")
        parent, item, flat = parent.ravel(), item.ravel(), scores.ravel()
        order = np.lexsort((item, lex_rank[parent], -flat))
        order = order[np.isfinite(flat[order])][:beam_size]
        new_paths = [paths[parent[i]] + (int(item[i]),) for i in order]
        ipv = flat[order]
        surv = surv[parent[order]] * cont[t, item[order]]
        paths = new_paths
    return list(paths[0])


def beam_search_plan(model: MdpModel, beam_size: int = 5) -> Plan:
    """Left-to-right beam over prefixes scored by their expected clicks."""
    _check_model(model)
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    return make_plan(model, _beam(model, beam_size, dedup=False), "beam", beam_size)


def beam_search_dedup_plan(model: MdpModel, beam_size: int = 5) -> Plan:
    _check_model(model)
    _check_dedup(model)
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    return make_plan(model, _beam(model, beam_size, dedup=True), "beam_dedup", beam_size)


def brute_force_plan(model: MdpModel, dedup: bool = False) -> Plan:
    """Exhaustive search over all K**T paths (injective paths if ``dedup``).

    Paths are generated in lexicographic order and the first maximizer wins.
    """
    _check_model(model)
    T, K = model.reward.shape
    if dedup:
        _check_dedup(model)
        count = 1
        for i in range(T):
            count *= K - i
        gen = itertools.permutations(range(K), T)
    else:
        count = K**T
        gen = itertools.product(range(K), repeat=T)
    if count > BRUTE_FORCE_LIMIT:
        raise SizeError(f"{count} paths exceeds the brute-force limit {BRUTE_FORCE_LIMIT}")
    paths = np.array(list(gen), dtype=np.int64).reshape(count, T)
    steps = np.arange(T)
    rewards = model.reward[steps, paths]
    cont = 1.0 - model.quit[steps, paths]
    reach = np.ones_like(rewards)
    reach[:, 1:] = np.cumprod(cont[:, :-1], axis=1)
    totals = (rewards * reach).sum(axis=1)
    best = paths[int(np.argmax(totals))]
    return make_plan(model, best, "brute_force_dedup" if dedup else "brute_force")


def ssp_plan_dedup(model: MdpModel) -> Plan:
    """Duplicate-free compromise built on the unconstrained state values.

    Backward: rank items at each step by their unconstrained q-value and keep
    the best T as that step's candidates.  Forward: take the best candidate
    not used yet; an exhausted list falls back to the best unused item.
    """
    _check_dedup(model)
    T, K = model.reward.shape
    _, q = ssp_values(model)
    # stable sort on -q keeps lower indices first among equal values
    ranked = np.argsort(-q, axis=1, kind="stable")
    candidates = ranked[:, :T]
    used: set[int] = set()
    path = []
    for t in range(T):
        choice = next((int(a) for a in candidates[t] if a not in used), None)
        if choice is None:
            choice = next(int(a) for a in ranked[t] if a not in used)
        used.add(choice)
        path.append(choice)
    return make_plan(model, path, "ssp_dedup")


def greedy_dedup_plan(model: MdpModel) -> Plan:
    _check_dedup(model)
    T, K = model.reward.shape
    available = np.ones(K, dtype=bool)
    path = []
    for t in range(T):
        row = np.where(available, model.reward[t], -np.inf)
        a = int(np.argmax(row))
        available[a] = False
        path.append(a)
    return make_plan(model, path, "greedy_dedup")


def perturb_model(model: MdpModel, m: int, seed: int) -> MdpModel:
    """Add Uniform(-0.02m, 0.02m) noise to every reward and quit entry."""
    if not 0 <= m <= 10:
        raise ConfigError(f"noise level m must be in 0..10, got {m}")
    if m == 0:
        return MdpModel(model.reward.copy(), model.quit.copy(), model.item_ids)
    rng = np.random.default_rng(seed)
    half = 0.02 * m
    reward = model.reward + rng.uniform(-half, half, size=model.reward.shape)
    quit = model.quit + rng.uniform(-half, half, size=model.quit.shape)
    return MdpModel(np.clip(reward, 0.0, 1.0), np.clip(quit, 0.0, 1.0), model.item_ids)


def plan_with(model: MdpModel, strategy: str, config: PlannerConfig = PlannerConfig()) -> Plan:
    """Dispatch on a strategy name (``ssp``, ``greedy`` or ``beam``)."""
    if strategy == "ssp":
        return ssp_plan_dedup(model) if config.dedup else ssp_plan(model)[0]
    if strategy == "greedy":
        return greedy_dedup_plan(model) if config.dedup else greedy_plan(model)
    if strategy == "beam":
        if config.dedup:
            return beam_search_dedup_plan(model, config.beam_size)
        return beam_search_plan(model, config.beam_size)
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
