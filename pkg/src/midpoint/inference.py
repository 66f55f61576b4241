"""Attacks that try to recover the private label, and the AUC risk metric.

Scores are oriented so that larger means "more likely +1".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.special
import scipy.stats

from .factorization import ExtendedItemProfile
from .protocol import DEFAULT_RIDGE, solve_normal_equations

DEFAULT_LEVELS = (0, 1, 2, 3, 4, 5)


class LseAttack(NamedTuple):
    label: int
    score: float
    x_hat: np.ndarray


def _rss(V: np.ndarray, y: np.ndarray, ridge: float) -> tuple[float, np.ndarray]:
    x, _ = solve_normal_equations(V, y, ridge)
    resid = y - V @ x
    return float(resid @ resid), x


def lse_attack(
    ratings: Sequence[float],
    catalog_slice: Sequence[ExtendedItemProfile],
    ridge: float = DEFAULT_RIDGE,
) -> LseAttack:
    """Joint least-squares fit over both label hypotheses.

    Regresses ``r - s * bias`` on the latent vectors for ``s = +1`` and
    ``s = -1`` and keeps the hypothesis with the smaller residual sum of
    squares.  The score is ``RSS(-1) - RSS(+1)``; exact ties go to +1.
    ``x_hat`` is the latent fit under the chosen label.
    """
    r = np.asarray(ratings, dtype=float)
    if len(r) == 0:
        raise ValueError("no ratings to attack")
    if len(r) != len(catalog_slice):
        raise ValueError("one profile per rating required")
    V = np.vstack([p.latent for p in catalog_slice])
    b = np.array([p.bias for p in catalog_slice])
    rss_plus, x_plus = _rss(V, r - b, ridge)
    rss_minus, x_minus = _rss(V, r + b, ridge)
    if rss_plus <= rss_minus:
        return LseAttack(1, rss_minus - rss_plus, x_plus)
    return LseAttack(-1, rss_minus - rss_plus, x_minus)


def dense_inputs(
    user_ratings: Sequence[Mapping[str, float]], item_ids: Sequence[str]
) -> np.ndarray:
    """Users x items matrix with 0 for items a user did not rate (or reveal)."""
    index = {i: k for k, i in enumerate(item_ids)}
    X = np.zeros((len(user_ratings), len(item_ids)))
    for u, ratings in enumerate(user_ratings):
        for item, r in ratings.items():
            if item in index:
                X[u, index[item]] = r
    return X


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all(np.isin(y, (1, -1))):
        raise ValueError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    return y.astype(int)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float

    def to_json(self) -> str:
        return json.dumps({"kind": "logistic", "weights": self.weights.tolist(), "intercept": self.intercept})

    @classmethod
    def from_json(cls, text: str) -> "LogisticModel":
        doc = json.loads(text)
        return cls(np.array(doc["weights"], float), float(doc["intercept"]))


def logistic_train(
    X: np.ndarray,
    labels: Sequence[int],
    l2: float = 1.0,
    epochs: int = 300,
    seed: int = 0,
) -> LogisticModel:
    """L2-regularized logistic regression by full-batch gradient descent.

    Minimizes the mean log-loss plus ``l2 / (2n) * |w|^2`` (intercept not
    penalized) with step ``1 / L``, ``L`` the gradient's Lipschitz bound.
    """
    X = np.asarray(X, dtype=float)
    y = _check_labels(labels)
    n, m = X.shape
    t = (y == 1).astype(float)
    Xa = np.hstack([X, np.ones((n, 1))])
    lipschitz = 0.25 * np.linalg.norm(Xa, 2) ** 2 / n + l2 / n
    step = 1.0 / lipschitz
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m + 1) * 1e-3
    penalty = np.full(m + 1, l2 / n)
    penalty[-1] = 0.0
    # Nesterov momentum keeps a fixed step count adequate on poorly scaled data
    z, w_prev = w.copy(), w.copy()
    for k in range(1, epochs + 1):
        p = scipy.special.expit(Xa @ z)
        grad = Xa.T @ (p - t) / n + penalty * z
        w_prev, w = w, z - step * grad
        z = w + (k - 1) / (k + 2) * (w - w_prev)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("logistic regression diverged")
    return LogisticModel(w[:-1], float(w[-1]))


def logistic_score(model: LogisticModel, X: np.ndarray) -> np.ndarray:
    """Log-odds ``log(P(+1) / P(-1))`` for each row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return X @ model.weights + model.intercept


@dataclass(frozen=True)
class NaiveBayesModel:
    """Per-class log-probabilities of (item, rating level) events."""

    log_prob_plus: np.ndarray
    log_prob_minus: np.ndarray
    log_prior_ratio: float
    levels: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "naive_bayes",
            "log_prob_plus": self.log_prob_plus.tolist(),
            "log_prob_minus": self.log_prob_minus.tolist(),
            "log_prior_ratio": self.log_prior_ratio,
            "levels": list(self.levels),
        })

    @classmethod
    def from_json(cls, text: str) -> "NaiveBayesModel":
        doc = json.loads(text)
        return cls(np.array(doc["log_prob_plus"]), np.array(doc["log_prob_minus"]),
                   float(doc["log_prior_ratio"]), tuple(doc["levels"]))


def _level_index(X: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    lv = np.asarray(levels, dtype=float)
    idx = np.searchsorted(lv, X)
    ok = (idx < len(lv)) & (lv[np.minimum(idx, len(lv) - 1)] == X)
    if not np.all(ok):
        raise ValueError(
            f"inputs must take values in the rating levels {tuple(levels)}; round them first"
        )
    return idx


def nb_train(
    X: np.ndarray, labels: Sequence[int], alpha: float = 1.0, levels: Sequence[int] = DEFAULT_LEVELS
) -> NaiveBayesModel:
    """Multinomial naive Bayes over one (item, level) event per item.

    Every user contributes, for each item, one count to the event
    ``(item, level of their rating)``, level 0 meaning unrated.  Class
    event probabilities use additive smoothing ``alpha``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    levels = tuple(sorted(int(v) for v in levels))
    y = _check_labels(labels)
    idx = _level_index(X, levels)
    n, m = idx.shape
    L = len(levels)
    log_probs = []
    for cls in (1, -1):
        rows = idx[y == cls]
        counts = np.zeros((m, L))
        for j in range(m):
            counts[j] = np.bincount(rows[:, j], minlength=L)
        smoothed = counts + alpha
        log_probs.append(np.log(smoothed) - np.log(smoothed.sum()))
    n_plus, n_minus = int(np.sum(y == 1)), int(np.sum(y == -1))
    return NaiveBayesModel(log_probs[0], log_probs[1], float(np.log(n_plus / n_minus)), levels)


def nb_score(model: NaiveBayesModel, X: np.ndarray) -> np.ndarray:
    """Log posterior ratio ``log P(+1 | x) - log P(-1 | x)`` per row."""
    idx = _level_index(np.atleast_2d(X), model.levels)
    diff = model.log_prob_plus - model.log_prob_minus
    cols = np.arange(idx.shape[1])
    return model.log_prior_ratio + diff[cols[None, :], idx].sum(axis=1)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random +1 outscores a random -1, ties counting 1/2."""
    s = np.asarray(scores, dtype=float)
    y = _check_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    ranks = scipy.stats.rankdata(s)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
