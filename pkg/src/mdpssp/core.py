"""Personalized session MDP and closed-form expected engagement.

A session is modelled as a chain of T browse steps plus an absorbing
"user left" state.  Showing item ``a`` at step ``t`` yields an engagement
(click) probability ``reward[t, a]`` and sends the user to the absorbing
state with probability ``quit[t, a]``; otherwise the user moves on to step
``t + 1``.  After the last step the session always ends, so the final row of
``quit`` is stored but never multiplied into anything.

Indices are zero-based throughout: ``reward[0]`` is the first step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DomainError, InvalidModelError, InvalidPathError

__all__ = [
    "MdpModel",
    "Plan",
    "StateValueTable",
    "expected_ipv",
    "expected_bl",
    "expected_ctr",
    "survival_distribution",
    "make_plan",
]


def _as_prob_matrix(name: str, values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidModelError(f"{name} must be a T x K matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidModelError(f"{name} contains non-finite entries")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidModelError(f"{name} entries must lie in [0, 1]")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Per-(step, item) click and quit probabilities for one user session.

    ``reward`` and ``quit`` are read-only ``(T, K)`` float64 arrays.
    """

    reward: np.ndarray
    quit: np.ndarray
    item_ids: tuple = field(default=())

    def __post_init__(self) -> None:
        reward = _as_prob_matrix("reward", self.reward)
        quit = _as_prob_matrix("quit", self.quit)
        if reward.shape != quit.shape:
            raise InvalidModelError(
                f"reward shape {reward.shape} != quit shape {quit.shape}"
            )
        T, K = reward.shape
        if T == 0 or K == 0:
            raise InvalidModelError("horizon and number of items must be positive")
        item_ids = tuple(self.item_ids) if len(self.item_ids) else tuple(range(K))
        if len(item_ids) != K:
            raise InvalidModelError(f"{len(item_ids)} item ids for {K} columns")
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "quit", quit)
        object.__setattr__(self, "item_ids", item_ids)

    @property
    def horizon(self) -> int:
        return self.reward.shape[0]

    @property
    def num_items(self) -> int:
        return self.reward.shape[1]

    @property
    def cont(self) -> np.ndarray:
        """Continue probabilities ``1 - quit``."""
        return 1.0 - self.quit

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MdpModel):
            return NotImplemented
        return (
            self.item_ids == other.item_ids
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.quit, other.quit)
        )

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "num_items": self.num_items,
            "item_ids": list(self.item_ids),
            "reward": self.reward.tolist(),
            "quit": self.quit.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MdpModel":
        try:
            model = cls(data["reward"], data["quit"], tuple(data["item_ids"]))
        except KeyError as exc:
            raise InvalidModelError(f"missing field {exc.args[0]!r}") from None
        if model.horizon != data.get("horizon", model.horizon) or model.num_items != data.get(
            "num_items", model.num_items
        ):
            raise InvalidModelError("declared horizon/num_items disagree with matrices")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MdpModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StateValueTable:
    """Optimal state values ``V*(s_1..s_T)`` followed by ``V*(s_A) = 0``."""

    values: tuple[float, ...]
    argmax_actions: tuple[int, ...]


@dataclass(frozen=True)
class Plan:
    path: tuple[int, ...]
    expected_ipv: float
    expected_bl: float
    expected_ctr: float
    strategy: str = ""
    beam_size: int | None = None

    def to_dict(self, item_ids: Sequence | None = None) -> dict:
        ids = [item_ids[a] for a in self.path] if item_ids is not None else list(self.path)
        out = {
            "path": ids,
            "expected_ipv": self.expected_ipv,
            "expected_bl": self.expected_bl,
            "expected_ctr": self.expected_ctr,
            "strategy": self.strategy,
        }
        if self.beam_size is not None:
            out["beam_size"] = self.beam_size
        return out


def _check_path(model: MdpModel, path: Sequence[int]) -> np.ndarray:
    idx = np.asarray(path)
    if idx.ndim != 1 or idx.size == 0:
        raise InvalidPathError("path must be a non-empty sequence of item indices")
    if idx.size > model.horizon:
        raise InvalidPathError(f"path length {idx.size} exceeds horizon {model.horizon}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidPathError("path entries must be integers")
    if idx.min() < 0 or idx.max() >= model.num_items:
        raise InvalidPathError(f"item index out of range [0, {model.num_items})")
    return idx


def survival_distribution(model: MdpModel, path: Sequence[int]) -> np.ndarray:
    """``P(tau >= t)`` for each position of ``path``; starts at 1."""
    idx = _check_path(model, path)
    steps = np.arange(idx.size)
    cont = 1.0 - model.quit[steps, idx]
    surv = np.empty(idx.size)
    surv[0] = 1.0
    # the continue probability at the last position never enters a product
    surv[1:] = np.cumprod(cont[:-1])
    return surv


def expected_ipv(model: MdpModel, path: Sequence[int]) -> float:
    """Expected cumulative clicks of showing ``path`` step by step."""
    idx = _check_path(model, path)
    rewards = model.reward[np.arange(idx.size), idx]
    return float(np.dot(rewards, survival_distribution(model, idx)))


def expected_bl(model: MdpModel, path: Sequence[int]) -> float:
    """Expected number of items browsed before the session ends."""
    return float(survival_distribution(model, path).sum())


def expected_ctr(ipv: float, bl: float) -> float:
    if not bl > 0:
        raise DomainError(f"browse length must be positive, got {bl}")
    return ipv / bl


def make_plan(
    model: MdpModel, path: Sequence[int], strategy: str = "", beam_size: int | None = None
) -> Plan:
    """Score ``path`` under ``model`` and package it as a :class:`Plan`."""
    path = tuple(int(a) for a in path)
    ipv = expected_ipv(model, path)
    bl = expected_bl(model, path)
    return Plan(path, ipv, bl, expected_ctr(ipv, bl), strategy, beam_size)
