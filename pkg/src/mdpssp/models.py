"""Click and quit models learned from bag-labelled browse logs.

Logs arrive as sessions of pages ("bags") of items ("instances").  Every page
after which the user kept browsing is a positive bag; the page the user left
on is the single negative bag at the end of the session.  Only bag labels are
observed for the quit model, so it is trained with MI-SVM: each positive bag
is represented by its highest-scoring instance (the witness), the classifier
is refit, and the loop repeats until the witnesses stop changing.

Raw linear scores become probabilities through Platt's sigmoid
``1 / (1 + exp(A*f + B))``.  With this sign convention A comes out negative
for a score that increases with the positive class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, special, stats

from .errors import DegenerateDataError, InvalidDataError, SchemaError

__all__ = [
    "Instance",
    "Bag",
    "SessionLog",
    "LinearModel",
    "Calibration",
    "MilFit",
    "TrainParams",
    "fit_logistic",
    "train_click_model",
    "fit_hinge",
    "nsk_bag_representation",
    "fit_mi_svm",
    "train_quit_model_mil",
    "train_quit_model_no_mil",
    "bag_score",
    "auc",
    "bag_level_auc",
    "fit_platt",
    "fit_platt_bags",
    "apply_platt",
    "binned_calibration_rmse",
]

PROB_CLAMP = 1e-6


@dataclass
class Instance:
    features: np.ndarray
    item_id: object = None
    category_id: object = None
    click: int = 0
    # simulator diagnostic; never read by the trainers
    true_continue: int | None = None


@dataclass
class Bag:
    instances: list[Instance]
    label: bool

    def __post_init__(self) -> None:
        if not self.instances:
            raise InvalidDataError("a bag needs at least one instance")

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([inst.features for inst in self.instances])


@dataclass
class SessionLog:
    user_id: object
    bags: list[Bag]
    witnesses: list[list[int]] = field(default_factory=list)

    @property
    def click_labels(self) -> list[list[int]]:
        return [[inst.click for inst in bag.instances] for bag in self.bags]

    def check_structure(self) -> None:
        """Only the final bag of a session may be negative."""
        for bag in self.bags[:-1]:
            if not bag.label:
                raise InvalidDataError(f"session {self.user_id}: negative bag before the end")


@dataclass(frozen=True)
class Calibration:
    A: float
    B: float

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B}


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    feature_schema: tuple[str, ...] = ()
    calibration: Calibration | None = None

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise InvalidDataError("model parameters must be a finite vector and bias")
        if self.feature_schema and len(self.feature_schema) != w.size:
            raise SchemaError(f"{len(self.feature_schema)} feature names for {w.size} weights")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "feature_schema", tuple(self.feature_schema))

    def score(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.size:
            raise SchemaError(f"expected {self.weights.size} features, got {X.shape[-1]}")
        return X @ self.weights + self.bias

    def probability(self, X: np.ndarray) -> np.ndarray:
        """Calibrated probability of the positive class."""
        if self.calibration is None:
            raise InvalidDataError("model has no calibration")
        return apply_platt(self.calibration, self.score(X))

    def with_calibration(self, cal: Calibration) -> "LinearModel":
        return LinearModel(self.weights, self.bias, self.feature_schema, cal)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LinearModel):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and self.feature_schema == other.feature_schema
            and self.calibration == other.calibration
        )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "calibration": None if self.calibration is None else self.calibration.to_dict(),
            "feature_schema": list(self.feature_schema),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearModel":
        try:
            cal = data.get("calibration")
            return cls(
                np.asarray(data["weights"], dtype=np.float64),
                data["bias"],
                tuple(data.get("feature_schema", ())),
                None if cal is None else Calibration(float(cal["A"]), float(cal["B"])),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed model document: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainParams:
    learning_rate: float = 0.1
    epochs: int = 200
    l2: float = 1e-4
    seed: int = 0
    max_outer_iters: int = 50


# ---------------------------------------------------------------------------
# linear learners


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise InvalidDataError(f"features {X.shape} do not match {y.size} labels")
    if not np.all(np.isfinite(X)):
        raise InvalidDataError("features contain NaN or infinite values")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidDataError("labels must be 0/1")
    return X, y


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd, mu, sd


def _to_raw(w: np.ndarray, b: float, mu: np.ndarray, sd: np.ndarray) -> tuple[np.ndarray, float]:
    """Map weights learned on standardized inputs back to raw features."""
    w_raw = w / sd
    return w_raw, float(b - w_raw @ mu)


def _init(d: int, seed: int) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng(seed)
    return rng.normal(scale=1e-3, size=d), 0.0


def _log_loss(X, y, w, b, l2) -> float:
    z = X @ w + b
    # log(1 + e^z) - y*z, computed without overflow
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w)


def fit_logistic(
    X, y, learning_rate=0.1, epochs=200, l2=1e-4, seed=0
) -> tuple[np.ndarray, float, list[float]]:
    """Full-batch gradient descent on L2-regularized log-loss.

    Step size decays as ``learning_rate / sqrt(epoch)``.  Inputs are
    standardized internally (the penalty applies to standardized weights);
    the returned weights act on raw features.  Also returns the loss after
    every epoch, entry 0 being the initial loss.
    """
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2 and l2 <= 0:
        raise DegenerateDataError("single-class data has no finite minimizer without l2")
    X, mu, sd = _standardize(X)
    w, b = _init(X.shape[1], seed)
    n = X.shape[0]
    losses = [_log_loss(X, y, w, b, l2)]
    for epoch in range(1, epochs + 1):
        resid = special.expit(X @ w + b) - y
        grad_w = X.T @ resid / n + l2 * w
        grad_b = resid.mean()
        step = learning_rate / np.sqrt(epoch)
        w = w - step * grad_w
        b = b - step * grad_b
        losses.append(_log_loss(X, y, w, b, l2))
    w, b = _to_raw(w, b, mu, sd)
    return w, b, losses


def train_click_model(
    X, y, params: TrainParams = TrainParams(), feature_schema: Sequence[str] = ()
) -> LinearModel:
    """Logistic click model; raises on single-class labels."""
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("click labels contain a single class")
    w, b, _ = fit_logistic(X, y, params.learning_rate, params.epochs, params.l2, params.seed)
    return LinearModel(w, b, tuple(feature_schema))


def _hinge_objective(X, s, c, w, b, l2) -> float:
    margins = 1.0 - s * (X @ w + b)
    return float(np.sum(c * np.maximum(margins, 0.0)) + 0.5 * l2 * w @ w)


def fit_hinge(X, y, learning_rate=0.1, epochs=200, l2=1e-4, seed=0) -> tuple[np.ndarray, float]:
    """Linear SVM by full-batch subgradient descent.

    The two classes get equal total weight so a heavy negative class cannot
    swamp the few witnesses.  Inputs are standardized internally as in
    :func:`fit_logistic`.  Subgradient steps are not monotone, so the iterate
    with the lowest objective is returned.
    """
    X, y = _check_xy(X, y)
    X, mu, sd = _standardize(X)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("hinge training needs both classes")
    s = 2.0 * y - 1.0
    c = np.where(y == 1, 0.5 / n_pos, 0.5 / n_neg)
    w, b = _init(X.shape[1], seed)
    best = (_hinge_objective(X, s, c, w, b, l2), w, b)
    for epoch in range(1, epochs + 1):
        active = s * (X @ w + b) < 1.0
        coef = np.where(active, c * s, 0.0)
        grad_w = l2 * w - X.T @ coef
        grad_b = -coef.sum()
        step = learning_rate / np.sqrt(epoch)
        w = w - step * grad_w
        b = b - step * grad_b
        obj = _hinge_objective(X, s, c, w, b, l2)
        if obj < best[0]:
            best = (obj, w, b)
    return _to_raw(best[1], best[2], mu, sd)


# ---------------------------------------------------------------------------
# multi-instance learning


def nsk_bag_representation(bag: Bag | np.ndarray) -> np.ndarray:
    """Normalized set kernel feature map with a linear base kernel."""
    X = bag.matrix if isinstance(bag, Bag) else np.atleast_2d(np.asarray(bag, dtype=np.float64))
    total = X.sum(axis=0)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return np.zeros_like(total)
    return total / norm


def _split_bags(sessions: Sequence[SessionLog]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if not sessions:
        raise InvalidDataError("no sessions to train on")
    pos, neg = [], []
    for session in sessions:
        for bag in session.bags:
            (pos if bag.label else neg).append(bag.matrix)
    if not neg:
        raise DegenerateDataError("no negative bags: nobody ever quit")
    if not pos:
        raise DegenerateDataError("no positive bags")
    dims = {b.shape[1] for b in pos + neg}
    if len(dims) != 1:
        raise InvalidDataError(f"inconsistent feature dimensions {sorted(dims)}")
    return pos, neg


def _select_witnesses(pos_bags: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    # argmax picks the lowest position among equal scores
    return np.array([int(np.argmax(bag @ w)) for bag in pos_bags], dtype=np.int64)


@dataclass
class MilFit:
    model: LinearModel
    witnesses: np.ndarray
    iterations: int
    converged: bool
    initial_model: LinearModel


def fit_mi_svm(
    sessions: Sequence[SessionLog],
    params: TrainParams = TrainParams(),
    feature_schema: Sequence[str] = (),
) -> MilFit:
    """MI-SVM with an NSK-initialized first classifier.

    The first classifier is trained on one normalized-set vector per bag; its
    weight vector then ranks the instances inside each positive bag.  Later
    rounds train on the witnesses (label 1) plus every instance of every
    negative bag (label 0).  ``witnesses[i]`` is the chosen position inside the
    i-th positive bag, in log order.
    """
    pos, neg = _split_bags(sessions)
    hp = dict(learning_rate=params.learning_rate, epochs=params.epochs, l2=params.l2, seed=params.seed)

    reps = np.vstack([nsk_bag_representation(b) for b in pos + neg])
    labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
    w, b = fit_hinge(reps, labels, **hp)
    initial = LinearModel(w, b, tuple(feature_schema))

    neg_X = np.vstack(neg)
    witnesses = _select_witnesses(pos, w)
    converged = False
    iterations = 0
    while iterations < params.max_outer_iters:
        iterations += 1
        pos_X = np.vstack([bag[j] for bag, j in zip(pos, witnesses)])
        X = np.vstack([pos_X, neg_X])
        y = np.r_[np.ones(len(pos_X)), np.zeros(len(neg_X))]
        w, b = fit_hinge(X, y, **hp)
        selected = _select_witnesses(pos, w)
        if np.array_equal(selected, witnesses):
            converged = True
            break
        witnesses = selected
    return MilFit(LinearModel(w, b, tuple(feature_schema)), witnesses, iterations, converged, initial)


def train_quit_model_mil(
    sessions: Sequence[SessionLog],
    params: TrainParams = TrainParams(),
    feature_schema: Sequence[str] = (),
) -> LinearModel:
    """Instance-level continue scorer learned from bag labels (see :func:`fit_mi_svm`)."""
    return fit_mi_svm(sessions, params, feature_schema).model


def train_quit_model_no_mil(
    sessions: Sequence[SessionLog],
    params: TrainParams = TrainParams(),
    feature_schema: Sequence[str] = (),
) -> LinearModel:
    """Baseline: every instance inherits its bag's label."""
    pos, neg = _split_bags(sessions)
    X, y = [], []
    for session in sessions:
        for bag in session.bags:
            X.append(bag.matrix)
            y.append(np.full(len(bag.instances), 1.0 if bag.label else 0.0))
    w, b = fit_hinge(
        np.vstack(X), np.concatenate(y), params.learning_rate, params.epochs, params.l2, params.seed
    )
    return LinearModel(w, b, tuple(feature_schema))


def bag_score(model: LinearModel, bag: Bag | np.ndarray) -> float:
    X = bag.matrix if isinstance(bag, Bag) else np.atleast_2d(bag)
    return float(model.score(X).max())


def auc(scores, labels) -> float:
    """Rank AUC (Mann-Whitney); tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def bag_level_auc(model: LinearModel, bags: Iterable[Bag]) -> float:
    bags = list(bags)
    return auc([bag_score(model, b) for b in bags], [b.label for b in bags])


# ---------------------------------------------------------------------------
# calibration


def apply_platt(cal: Calibration, f):
    """``1 / (1 + exp(A*f + B))`` clamped away from 0 and 1."""
    p = special.expit(-(cal.A * np.asarray(f, dtype=np.float64) + cal.B))
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p) if p.ndim == 0 else p


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.float64).ravel()
    if f.size != y.size:
        raise InvalidDataError(f"{f.size} scores for {y.size} labels")
    if not np.all(np.isfinite(f)):
        raise InvalidDataError("scores must be finite")
    return f, y


def fit_platt(scores, labels, max_iter: int = 100) -> Calibration:
    """Platt scaling by Newton's method with backtracking.

    Targets are smoothed to ``(n+ + 1)/(n+ + 2)`` and ``1/(n- + 2)``.
    """
    f, y = _check_scores(scores, labels)
    if f.size < 10:
        raise InvalidDataError(f"need at least 10 points, got {f.size}")
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("calibration data contains a single class")
    t = np.where(y == 1, (n_pos + 1) / (n_pos + 2), 1.0 / (n_neg + 2))

    def objective(A, B):
        z = A * f + B
        # negative log-likelihood of targets t under p = 1/(1+e^z)
        return float(np.sum(t * z + np.logaddexp(0.0, -z)))

    A, B = 0.0, float(np.log((n_neg + 1) / (n_pos + 1)))
    fval = objective(A, B)
    sigma = 1e-12
    for _ in range(max_iter):
        p = special.expit(-(A * f + B))
        d1 = t - p
        d2 = p * (1 - p)
        g1 = float(np.dot(f, d1))
        g2 = float(d1.sum())
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        h11 = float(np.dot(f * f, d2)) + sigma
        h22 = float(d2.sum()) + sigma
        h21 = float(np.dot(f, d2))
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= 1e-10:
            newA, newB = A + step * dA, B + step * dB
            newf = objective(newA, newB)
            if newf < fval + 1e-4 * step * gd:
                A, B, fval = newA, newB, newf
                break
            step /= 2.0
        else:
            break
    return Calibration(float(A), float(B))


def fit_platt_bags(bag_scores: Sequence[np.ndarray], bag_labels) -> Calibration:
    """Platt parameters for instance scores fitted against bag labels.

    An instance keeps the user with probability ``p_i = 1/(1+exp(A f_i + B))``
    and a page keeps the user if any of its items does, so
    ``P(bag positive) = 1 - prod(1 - p_i)``.  A and B maximize the bag-level
    Bernoulli likelihood of that noisy-OR model.
    """
    scores = [np.asarray(s, dtype=np.float64).ravel() for s in bag_scores]
    y = np.asarray(bag_labels).astype(bool)
    if len(scores) != y.size:
        raise InvalidDataError(f"{len(scores)} bags for {y.size} labels")
    if y.all() or not y.any():
        raise DegenerateDataError("bag calibration needs both labels")
    if not all(np.all(np.isfinite(s)) for s in scores):
        raise InvalidDataError("scores must be finite")
    f = np.concatenate(scores)
    owner = np.repeat(np.arange(len(scores)), [s.size for s in scores])

    def nll(params):
        A, B = params
        z = A * f + B
        log_quit = -np.logaddexp(0.0, -z)  # log(1 - p_i)
        q = special.expit(z)
        s = np.bincount(owner, weights=log_quit, minlength=len(scores))
        s = np.minimum(s, -1e-12)
        log_pos = np.log(-np.expm1(s))
        value = -(np.sum(log_pos[y]) + np.sum(s[~y]))
        # d s_bag / dz_i = 1 - q_i = p_i
        dlogpos_ds = -np.exp(s) / -np.expm1(s)
        per_bag = np.where(y, dlogpos_ds, 1.0)
        dz = -per_bag[owner] * (1.0 - q)
        return value, np.array([np.dot(dz, f), dz.sum()])

    start = fit_platt(f, np.repeat(y, [s.size for s in scores]))
    res = optimize.minimize(nll, x0=[start.A, start.B], jac=True, method="L-BFGS-B")
    return Calibration(float(res.x[0]), float(res.x[1]))


def binned_calibration_rmse(predicted, labels, num_bins: int = 10) -> float:
    """RMSE between mean prediction and positive rate over equal-count bins."""
    p, y = _check_scores(predicted, labels)
    if num_bins < 2:
        raise InvalidDataError("num_bins must be at least 2")
    if p.size < num_bins:
        raise InvalidDataError(f"{p.size} points cannot fill {num_bins} bins")
    order = np.argsort(p, kind="stable")
    bins = np.array_split(order, num_bins)
    diffs = np.array([p[b].mean() - y[b].mean() for b in bins])
    return float(np.sqrt(np.mean(diffs**2)))
