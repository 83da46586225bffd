"""Synthetic users, items and bag-structured browse logs.

True click and continue probabilities are logistic in linear scores of the
item features plus two interactive features: the step index inside the
session and how often the user had seen the item's category before the
session started.  The continue direction is tilted away from the click
direction by ``rho`` so the two can be made as (un)related as needed.

Every random stream is derived from ``(stream id, seed + index)`` so a user's
draws do not depend on which other users were generated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import special

from .core import MdpModel, Plan
from .errors import ConfigError, InvalidDataError, SchemaError
from .models import PROB_CLAMP, Bag, Instance, LinearModel, SessionLog

__all__ = [
    "SimConfig",
    "GroundTruth",
    "UserContext",
    "TrainedSource",
    "feature_schema",
    "step_feature",
    "generate_ground_truth",
    "generate_users",
    "generate_sessions",
    "generate_planted_witness_sessions",
    "instance_features",
    "produce_mdp",
    "rollout",
    "rollouts",
    "sessions_to_jsonl",
    "sessions_from_jsonl",
]

# stream ids for seed derivation
_CATALOG, _USERS, _SESSIONS, _USER_NOISE, _ROLLOUT, _PLANTED = range(6)

STEP_SCALE = 10.0


def _rng(stream: int, seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([stream, seed + index])


def step_feature(t):
    """Interactive feature for the zero-based step index ``t``."""
    return np.asarray(t, dtype=np.float64) / STEP_SCALE


@dataclass(frozen=True)
class SimConfig:
    num_users: int = 500
    sessions_per_user: int = 4
    catalog_size: int = 2000
    num_categories: int = 20
    candidates_per_user: int = 100
    feature_dim: int = 8
    bag_size: int = 6
    max_pages: int = 10
    horizon: int = 20
    rho: float = 0.2
    feature_scale: float = 1.0
    click_signal: float = 1.0
    continue_signal: float = 1.6
    click_bias: float = -1.2
    continue_bias: float = -1.0
    click_step_coef: float = -0.05
    continue_step_coef: float = -0.1
    click_exposure_coef: float = 0.3
    continue_exposure_coef: float = -0.3
    mean_exposure: float = 2.0
    noise_scale: float = 0.2
    seed: int = 7

    def __post_init__(self) -> None:
        positive = (
            "num_users", "sessions_per_user", "catalog_size", "num_categories",
            "candidates_per_user", "feature_dim", "bag_size", "max_pages", "horizon",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.candidates_per_user > self.catalog_size:
            raise ConfigError("candidates_per_user exceeds catalog_size")
        if self.noise_scale < 0 or self.feature_scale <= 0:
            raise ConfigError("scales must be non-negative (feature_scale positive)")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def feature_schema(feature_dim: int) -> tuple[str, ...]:
    return tuple(f"x{i}" for i in range(feature_dim)) + ("step", "category_exposure")


@dataclass(eq=False)
class GroundTruth:
    """Hidden generator of the synthetic world; the evaluation oracle."""

    item_features: np.ndarray
    item_categories: np.ndarray
    click_weights: np.ndarray
    continue_weights: np.ndarray
    click_bias: float
    continue_bias: float
    click_step_coef: float
    continue_step_coef: float
    click_exposure_coef: float
    continue_exposure_coef: float
    rho: float
    noise_scale: float
    seed: int

    @property
    def catalog_size(self) -> int:
        return self.item_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.item_features.shape[1]

    @property
    def schema(self) -> tuple[str, ...]:
        return feature_schema(self.feature_dim)

    def base_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-item click and continue scores without interactive terms."""
        X = self.item_features
        return X @ self.click_weights + self.click_bias, X @ self.continue_weights + self.continue_bias

    def user_noise(self, user_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-user idiosyncratic score offsets that no feature explains."""
        if self.noise_scale == 0:
            zero = np.zeros(self.catalog_size)
            return zero, zero
        rng = _rng(_USER_NOISE, self.seed, user_index)
        noise = rng.normal(scale=self.noise_scale, size=(2, self.catalog_size))
        return noise[0], noise[1]

    def probabilities(
        self, items: np.ndarray, steps: np.ndarray, exposure: np.ndarray, user_index: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """True (click, continue) probabilities; arguments broadcast together."""
        items = np.asarray(items)
        click_base, cont_base = self.base_scores()
        click_noise, cont_noise = self.user_noise(user_index)
        s = step_feature(steps)
        e = np.asarray(exposure, dtype=np.float64)
        click = (
            click_base[items] + click_noise[items] + self.click_step_coef * s
            + self.click_exposure_coef * e
        )
        cont = (
            cont_base[items] + cont_noise[items] + self.continue_step_coef * s
            + self.continue_exposure_coef * e
        )
        return special.expit(click), special.expit(cont)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                raise SchemaError(f"ground truth missing field {f.name!r}")
            value = data[f.name]
            kwargs[f.name] = np.asarray(value) if isinstance(value, list) else value
        kwargs["item_features"] = kwargs["item_features"].astype(np.float64)
        return cls(**kwargs)


@dataclass
class UserContext:
    user_id: int
    category_exposure: np.ndarray
    candidates: np.ndarray

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "category_exposure": self.category_exposure.tolist(),
            "candidates": self.candidates.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserContext":
        try:
            return cls(
                int(data["user_id"]),
                np.asarray(data["category_exposure"], dtype=np.int64),
                np.asarray(data["candidates"], dtype=np.int64),
            )
        except KeyError as exc:
            raise SchemaError(f"user context missing {exc.args[0]!r}") from None


def _orthonormal_pair(rng: np.random.Generator, d: int) -> tuple[np.ndarray, np.ndarray]:
    if d < 2:
        raise ConfigError("feature_dim must be at least 2 to decouple click and continue")
    q, _ = np.linalg.qr(rng.normal(size=(d, 2)))
    return q[:, 0], q[:, 1]


def generate_ground_truth(config: SimConfig) -> GroundTruth:
    rng = _rng(_CATALOG, config.seed)
    d = config.feature_dim
    features = rng.normal(scale=config.feature_scale, size=(config.catalog_size, d))
    categories = rng.integers(0, config.num_categories, size=config.catalog_size)
    u1, u2 = _orthonormal_pair(rng, d)
    direction = config.rho * u1 + np.sqrt(max(0.0, 1.0 - config.rho**2)) * u2
    return GroundTruth(
        item_features=features,
        item_categories=categories,
        click_weights=config.click_signal * u1,
        continue_weights=config.continue_signal * direction,
        click_bias=config.click_bias,
        continue_bias=config.continue_bias,
        click_step_coef=config.click_step_coef,
        continue_step_coef=config.continue_step_coef,
        click_exposure_coef=config.click_exposure_coef,
        continue_exposure_coef=config.continue_exposure_coef,
        rho=config.rho,
        noise_scale=config.noise_scale,
        seed=config.seed,
    )


def generate_users(config: SimConfig, first_index: int = 0, count: int | None = None) -> list[UserContext]:
    """User contexts: pre-session category exposure and a candidate set."""
    count = config.num_users if count is None else count
    users = []
    for i in range(first_index, first_index + count):
        rng = _rng(_USERS, config.seed, i)
        exposure = rng.poisson(config.mean_exposure, size=config.num_categories)
        candidates = np.sort(
            rng.choice(config.catalog_size, size=config.candidates_per_user, replace=False)
        )
        users.append(UserContext(i, exposure, candidates))
    return users


def exposure_feature(gt: GroundTruth, user: UserContext, items) -> np.ndarray:
    return np.log1p(user.category_exposure[gt.item_categories[np.asarray(items)]])


def instance_features(gt: GroundTruth, user: UserContext, items, steps) -> np.ndarray:
    """Model inputs ``[item features, step, category exposure]``.

    ``items`` and ``steps`` broadcast; the result has a trailing feature axis.
    """
    items = np.asarray(items)
    steps = np.asarray(steps)
    items, steps = np.broadcast_arrays(items, steps)
    x = gt.item_features[items]
    s = step_feature(steps)[..., None]
    e = exposure_feature(gt, user, items)[..., None]
    return np.concatenate([x, s, e], axis=-1)


def generate_sessions(gt: GroundTruth, config: SimConfig, users: Sequence[UserContext] | None = None) -> list[SessionLog]:
    """Browse logs: pages of ``bag_size`` random catalog items.

    A page is positive iff at least one of its items keeps the user; the
    session stops at the first negative page or after ``max_pages``.
    ``SessionLog.witnesses`` lists the positive positions of each bag.
    """
    if users is None:
        users = generate_users(config)
    m = config.bag_size
    sessions = []
    for user in users:
        for k in range(config.sessions_per_user):
            rng = _rng(_SESSIONS, config.seed, user.user_id * config.sessions_per_user + k)
            bags, witnesses = [], []
            for page in range(config.max_pages):
                items = rng.choice(gt.catalog_size, size=m, replace=False)
                steps = page * m + np.arange(m)
                p_click, p_cont = gt.probabilities(
                    items, steps, exposure_feature(gt, user, items), user.user_id
                )
                clicks = rng.random(m) < p_click
                conts = rng.random(m) < p_cont
                feats = instance_features(gt, user, items, steps)
                instances = [
                    Instance(
                        feats[j],
                        int(items[j]),
                        int(gt.item_categories[items[j]]),
                        int(clicks[j]),
                        int(conts[j]),
                    )
                    for j in range(m)
                ]
                label = bool(conts.any())
                bags.append(Bag(instances, label))
                witnesses.append([int(j) for j in np.flatnonzero(conts)])
                if not label:
                    break
            sessions.append(SessionLog(user.user_id, bags, witnesses))
    return sessions


def generate_planted_witness_sessions(
    num_sessions: int = 2000,
    bag_size: int = 6,
    feature_dim: int = 200,
    separation: float = 2.5,
    continue_rate: float = 0.5,
    max_pages: int = 20,
    positives_per_bag: int = 1,
    seed: int = 7,
) -> list[SessionLog]:
    """Logs where every positive bag holds planted positive instances.

    Negative-cluster instances are standard normal; a planted positive is
    shifted by ``separation`` along the all-ones direction (normalized), the
    same for every seed.  Each page keeps the user with probability
    ``continue_rate``.  ``witnesses`` records the planted positions (empty for
    negative bags).
    """
    if not 1 <= positives_per_bag <= bag_size:
        raise ConfigError("positives_per_bag must lie in 1..bag_size")
    direction = np.full(feature_dim, 1.0 / np.sqrt(feature_dim))
    sessions = []
    for i in range(num_sessions):
        rng = _rng(_PLANTED, seed, i)
        bags, witnesses = [], []
        for page in range(max_pages):
            X = rng.normal(size=(bag_size, feature_dim))
            positive = page < max_pages - 1 and rng.random() < continue_rate
            planted: list[int] = []
            if positive:
                planted = sorted(int(j) for j in rng.choice(bag_size, positives_per_bag, replace=False))
                X[planted] += separation * direction
            witnesses.append(planted)
            bags.append(
                Bag([Instance(X[k], (i, page, k), 0, 0, int(k in planted)) for k in range(bag_size)], positive)
            )
            if not positive:
                break
        sessions.append(SessionLog(i, bags, witnesses))
    return sessions


class TrainedSource:
    """Calibrated click and continue models as an MDP score source."""

    def __init__(self, click_model: LinearModel, continue_model: LinearModel):
        if click_model.calibration is None or continue_model.calibration is None:
            raise InvalidDataError("both models must be calibrated before producing MDPs")
        self.click_model = click_model
        self.continue_model = continue_model

    def check_schema(self, schema: Sequence[str]) -> None:
        for name, model in (("click", self.click_model), ("quit", self.continue_model)):
            if model.feature_schema and tuple(model.feature_schema) != tuple(schema):
                raise SchemaError(
                    f"{name} model expects features {list(model.feature_schema)}, "
                    f"producer supplies {list(schema)}"
                )


def produce_mdp(
    gt: GroundTruth,
    user: UserContext,
    source: "GroundTruth | TrainedSource",
    horizon: int,
    candidates: Sequence[int] | None = None,
) -> MdpModel:
    """Personalized MDP over the user's candidates for ``horizon`` steps.

    ``gt`` supplies the catalog; ``source`` supplies the probabilities.  The
    exposure feature is frozen at session start so entries depend only on
    (step, item).
    """
    if horizon < 1:
        raise ConfigError("horizon must be positive")
    items = np.asarray(user.candidates if candidates is None else candidates)
    steps = np.arange(horizon)[:, None]
    if isinstance(source, GroundTruth):
        click, cont = source.probabilities(
            items[None, :], steps, exposure_feature(gt, user, items)[None, :], user.user_id
        )
    else:
        source.check_schema(gt.schema)
        F = instance_features(gt, user, items[None, :], steps)
        click = source.click_model.probability(F)
        cont = source.continue_model.probability(F)
    reward = np.clip(click, PROB_CLAMP, 1 - PROB_CLAMP)
    quit = np.clip(1.0 - cont, PROB_CLAMP, 1 - PROB_CLAMP)
    return MdpModel(reward, quit, tuple(int(a) for a in items))


def rollouts(
    gt: GroundTruth, path_items: Sequence[int], user: UserContext, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` simulated sessions along a fixed list of catalog items.

    Returns per-rollout (clicks, browse length).  The click at the step where
    the user leaves still counts.
    """
    items = np.asarray(path_items)
    if items.size == 0:
        raise InvalidDataError("cannot roll out an empty path")
    steps = np.arange(items.size)
    p_click, p_cont = gt.probabilities(items, steps, exposure_feature(gt, user, items), user.user_id)
    rng = _rng(_ROLLOUT, seed)
    clicks = rng.random((n, items.size)) < p_click
    conts = rng.random((n, items.size)) < p_cont
    # step t is reached iff every earlier step continued
    reached = np.ones((n, items.size), dtype=bool)
    reached[:, 1:] = np.cumprod(conts[:, :-1], axis=1).astype(bool)
    ipv = (clicks & reached).sum(axis=1)
    bl = reached.sum(axis=1)
    return ipv, bl


def rollout(gt: GroundTruth, plan: Plan, user: UserContext, seed: int) -> tuple[int, int]:
    """One simulated session along ``plan`` (columns index the user's candidates)."""
    items = user.candidates[np.asarray(plan.path)]
    ipv, bl = rollouts(gt, items, user, 1, seed)
    return int(ipv[0]), int(bl[0])


# ---------------------------------------------------------------------------
# JSON Lines


def _session_to_dict(session: SessionLog) -> dict:
    return {
        "user_id": session.user_id,
        "bags": [
            {
                "label": "pos" if bag.label else "neg",
                "instances": [
                    {
                        "item_id": inst.item_id,
                        "category_id": inst.category_id,
                        "features": [float(v) for v in inst.features],
                        "click": int(inst.click),
                        "true_continue": inst.true_continue,
                    }
                    for inst in bag.instances
                ],
            }
            for bag in session.bags
        ],
    }


def sessions_to_jsonl(sessions: Sequence[SessionLog]) -> str:
    return "".join(json.dumps(_session_to_dict(s)) + "\n" for s in sessions)


def sessions_from_jsonl(text: str) -> list[SessionLog]:
    sessions = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            bags = []
            for b in doc["bags"]:
                if b["label"] not in ("pos", "neg"):
                    raise SchemaError(f"bag label {b['label']!r}")
                instances = [
                    Instance(
                        np.asarray(inst["features"], dtype=np.float64),
                        inst.get("item_id"),
                        inst.get("category_id"),
                        int(inst.get("click", 0)),
                        inst.get("true_continue"),
                    )
                    for inst in b["instances"]
                ]
                bags.append(Bag(instances, b["label"] == "pos"))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"session log line {lineno}: {exc}") from None
        session = SessionLog(doc["user_id"], bags)
        session.check_structure()
        sessions.append(session)
    return sessions
