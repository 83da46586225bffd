"""Offline evaluation: strategy tables, noise sweeps, dataset statistics.

Aggregates are exact sums (``math.fsum``), so they do not depend on the order
in which users are processed and a parallel run reproduces a serial one bit
for bit.
"""
from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import MdpModel, expected_bl, expected_ctr, expected_ipv
from .errors import InvalidDataError, MdpSspError
from .planner import PlannerConfig, perturb_model, plan_with
from .simulator import GroundTruth, TrainedSource, UserContext, produce_mdp

__all__ = [
    "DiscriminationStats",
    "EvalReport",
    "discrimination_stats",
    "weak_relatedness",
    "run_offline_comparison",
    "run_noise_sweep",
    "dataset_stats",
    "format_table",
    "noise_csv",
]

STRATEGY_LABELS = {"greedy": "GREEDY", "beam": "Beam Search", "ssp": "SSP"}


@dataclass(frozen=True)
class DiscriminationStats:
    std: float
    mean: float
    ratio: float
    # the ratio of the averaged std to the averaged mean, for reference
    ratio_of_means: float


def discrimination_stats(quit_lists: Sequence[Sequence[float]]) -> DiscriminationStats:
    """Across-user averages of the per-user std, mean and std/mean of quit probabilities."""
    if len(quit_lists) == 0:
        raise InvalidDataError("no users")
    stds, means, ratios = [], [], []
    for q in quit_lists:
        q = np.asarray(q, dtype=np.float64)
        if q.size == 0:
            raise InvalidDataError("empty quit list")
        mu = float(q.mean())
        # a constant list has no spread; avoid rounding residue in std
        sd = 0.0 if q.min() == q.max() else float(q.std())
        stds.append(sd)
        means.append(mu)
        ratios.append(0.0 if sd == 0 else sd / mu)
    std, mean = math.fsum(stds) / len(stds), math.fsum(means) / len(means)
    return DiscriminationStats(std, mean, math.fsum(ratios) / len(ratios), std / mean if mean else 0.0)


def _top(values: np.ndarray, L: int) -> np.ndarray:
    return np.argsort(-values, kind="stable")[:L]


def weak_relatedness(
    reward_lists: Sequence[Sequence[float]], continue_lists: Sequence[Sequence[float]], L: int = 20
) -> tuple[float, float]:
    """Mean Jaccard index and NDCG between top-L-by-click and top-L-by-continue.

    NDCG uses binary gain: an item of the continue list is relevant iff it is
    also in the click list, discounted by ``1/log2(rank + 1)`` and normalized
    by L relevant items in the first L ranks.
    """
    if len(reward_lists) != len(continue_lists) or not reward_lists:
        raise InvalidDataError("need one reward and one continue list per user")
    ideal = math.fsum(1.0 / math.log2(r + 1) for r in range(1, L + 1))
    jaccards, ndcgs = [], []
    for r, c in zip(reward_lists, continue_lists):
        r, c = np.asarray(r, dtype=np.float64), np.asarray(c, dtype=np.float64)
        if r.size != c.size:
            raise InvalidDataError("reward and continue lists differ in length")
        if L > r.size:
            raise InvalidDataError(f"list length {L} exceeds {r.size} candidates")
        l1, l2 = _top(r, L), _top(c, L)
        s1 = set(l1.tolist())
        jaccards.append(len(s1 & set(l2.tolist())) / len(s1 | set(l2.tolist())))
        dcg = math.fsum(1.0 / math.log2(rank + 1) for rank, a in enumerate(l2, 1) if a in s1)
        ndcgs.append(dcg / ideal)
    return math.fsum(jaccards) / len(jaccards), math.fsum(ndcgs) / len(ndcgs)


@dataclass
class EvalReport:
    config: dict
    seed: int
    mode: dict
    rows: list[dict] = field(default_factory=list)
    noise_curves: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def row(self, strategy: str, horizon: int, dedup: bool = False) -> dict:
        for r in self.rows:
            if r["strategy"] == strategy and r["horizon"] == horizon and r["dedup"] == dedup:
                return r
        raise KeyError((strategy, horizon, dedup))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "mode": self.mode,
            "rows": self.rows,
            "noise_curves": self.noise_curves,
            "stats": self.stats,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _user_rows(args) -> list[tuple]:
    gt, user, plan_source, score_source, horizons, strategies, config = args
    out = []
    for T in horizons:
        try:
            model = produce_mdp(gt, user, plan_source, T)
            scorer = model if score_source is None else produce_mdp(gt, user, score_source, T)
        except MdpSspError as exc:
            out.extend((T, s, None, None, None, f"{type(exc).__name__}: {exc}") for s in strategies)
            continue
        for s in strategies:
            try:
                plan = plan_with(model, s, config)
            except MdpSspError as exc:
                out.append((T, s, None, None, None, f"{type(exc).__name__}: {exc}"))
                continue
            injective = len(set(plan.path)) == len(plan.path)
            out.append(
                (T, s, expected_ipv(scorer, plan.path), expected_bl(scorer, plan.path), injective, None)
            )
    return out


def _map(fn, jobs: list, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


def run_offline_comparison(
    gt: GroundTruth,
    users: Sequence[UserContext],
    source: "GroundTruth | TrainedSource",
    horizons: Sequence[int] = (20, 50),
    strategies: Sequence[str] = ("greedy", "beam", "ssp"),
    dedup: bool = False,
    beam_size: int = 5,
    score_with: str = "same",
    workers: int = 1,
) -> tuple[list[dict], list[dict]]:
    """Plan every user's MDP with each strategy and aggregate IPV/BL/CTR.

    ``score_with="same"`` scores paths under the planning model;
    ``"truth"`` scores them under the ground-truth MDP.  Returns
    ``(rows, failures)``; a failing user is recorded and skipped.
    """
    if score_with not in ("same", "truth"):
        raise InvalidDataError(f"score_with must be 'same' or 'truth', got {score_with!r}")
    config = PlannerConfig(beam_size=beam_size, dedup=dedup)
    score_source = None if score_with == "same" else gt
    jobs = [(gt, u, source, score_source, tuple(horizons), tuple(strategies), config) for u in users]
    per_user = _map(_user_rows, jobs, workers)

    rows, failures = [], []
    for T in horizons:
        for s in strategies:
            ipvs, bls, all_injective = [], [], True
            for user, results in zip(users, per_user):
                for t, strat, ipv, bl, injective, err in results:
                    if t != T or strat != s:
                        continue
                    if err is not None:
                        failures.append({"user_id": user.user_id, "horizon": T, "strategy": s, "error": err})
                        continue
                    ipvs.append(ipv)
                    bls.append(bl)
                    all_injective &= injective
            n = len(ipvs)
            ipv_total, bl_total = math.fsum(ipvs), math.fsum(bls)
            rows.append(
                {
                    "strategy": s,
                    "horizon": T,
                    "dedup": dedup,
                    "beam_size": beam_size if s == "beam" else None,
                    "n_users": n,
                    "ipv": ipv_total,
                    "bl": bl_total,
                    "ctr": expected_ctr(ipv_total, bl_total) if n else float("nan"),
                    "ipv_mean": ipv_total / n if n else float("nan"),
                    "bl_mean": bl_total / n if n else float("nan"),
                    "all_paths_injective": all_injective,
                }
            )
    return rows, failures


def _noise_user(args) -> dict:
    gt, user, horizon, strategies, levels, seed, config = args
    true_model = produce_mdp(gt, user, gt, horizon)
    out = {}
    for m in levels:
        noisy = perturb_model(true_model, m, [seed, user.user_id, m])
        for s in strategies:
            plan = plan_with(noisy, s, config)
            out[(s, m)] = expected_ipv(true_model, plan.path)
    return out


def run_noise_sweep(
    gt: GroundTruth,
    users: Sequence[UserContext],
    horizon: int = 20,
    strategies: Sequence[str] = ("greedy", "beam", "ssp"),
    levels: Sequence[int] = tuple(range(11)),
    seed: int = 7,
    beam_size: int = 5,
    dedup: bool = False,
    workers: int = 1,
) -> dict:
    """Plan on noisy ground-truth MDPs, score on the clean ones.

    Returns ``{strategy: [mean revenue per user at each level]}``.  The same
    noise draw is shared by every strategy for a given (user, level).
    """
    config = PlannerConfig(beam_size=beam_size, dedup=dedup)
    jobs = [(gt, u, horizon, tuple(strategies), tuple(levels), seed, config) for u in users]
    per_user = _map(_noise_user, jobs, workers)
    n = len(users)
    return {
        s: [math.fsum(r[(s, m)] for r in per_user) / n for m in levels] for s in strategies
    }


def dataset_stats(
    gt: GroundTruth, users: Sequence[UserContext], source: "GroundTruth | TrainedSource", L: int = 20
) -> dict:
    """Discrimination and weak-relatedness of the first-step MDP rows."""
    quits, rewards, conts = [], [], []
    for u in users:
        model: MdpModel = produce_mdp(gt, u, source, 1)
        quits.append(model.quit[0])
        rewards.append(model.reward[0])
        conts.append(model.cont[0])
    d = discrimination_stats(quits)
    jaccard, ndcg = weak_relatedness(rewards, conts, L)
    return {
        "std": d.std,
        "mean": d.mean,
        "std_over_mean": d.ratio,
        "std_over_mean_of_averages": d.ratio_of_means,
        "jaccard": jaccard,
        "ndcg": ndcg,
        "list_length": L,
        "mean_candidates": float(np.mean([len(u.candidates) for u in users])),
    }


def format_table(rows: Sequence[dict], dedup: bool = False) -> str:
    """Plain-text table: one line per method, IPV/BL/CTR per horizon."""
    rows = [r for r in rows if r["dedup"] == dedup]
    horizons = sorted({r["horizon"] for r in rows})
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    header = ["Method"] + [f"{k}@T={T}" for T in horizons for k in ("IPV", "BL", "CTR")]
    lines = [header]
    for s in strategies:
        cells = [STRATEGY_LABELS.get(s, s)]
        for T in horizons:
            r = next(r for r in rows if r["strategy"] == s and r["horizon"] == T)
            cells += [f"{r['ipv']:.2f}", f"{r['bl']:.2f}", f"{r['ctr']:.2f}"]
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    text = io.StringIO()
    for line in lines:
        text.write("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))))
        text.write("\n")
    return text.getvalue()


def noise_csv(curves: dict, levels: Sequence[int], horizon: int | None = None) -> str:
    """CSV with columns ``m,strategy,revenue`` (plus ``horizon`` if given)."""
    buf = io.StringIO()
    buf.write("horizon,m,strategy,revenue\n" if horizon is not None else "m,strategy,revenue\n")
    for s, values in curves.items():
        for m, v in zip(levels, values):
            prefix = f"{horizon}," if horizon is not None else ""
            buf.write(f"{prefix}{m},{s},{v!r}\n")
    return buf.getvalue()
