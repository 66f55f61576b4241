"""Midpoint obfuscation protocols and the analyst-side estimator.

The analyst discloses each solicited item's bias (and, for sub-sampling,
the ratio ``rho_j = p_j^- / p_j^+``).  The user subtracts ``x0 * bias``
from every rating they reveal, so the revealed values follow
``<x, v_j> + noise`` whatever their private label.  With sub-sampling they
also keep each rated item with probability ``min(1, rho_j ** x0)``, which
makes every item's reveal probability ``min(p_j^+, p_j^-)`` for both
labels.

Labels are ``+1`` / ``-1`` throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
import scipy.linalg

from .factorization import ExtendedItemProfile

DEFAULT_RIDGE = 1e-8


class SingularDesignError(np.linalg.LinAlgError):
    """The revealed items' latent vectors do not span the latent space."""


def _check_label(x0: int) -> int:
    if x0 not in (1, -1):
        raise ValueError(f"private label must be +1 or -1, got {x0!r}")
    return int(x0)


def _ratio_to_json(rho: float):
    return "Infinity" if math.isinf(rho) else float(rho)


def _ratio_from_json(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity", "+inf"):
            return math.inf
        raise ValueError(f"bad ratio {value!r}")
    rho = float(value)
    if not rho >= 0:
        raise ValueError("ratio must be non-negative")
    return rho


@dataclass(frozen=True)
class Disclosure:
    """Public per-item information for one solicitation.

    ``ratio`` is ``None`` for the plain midpoint protocol.
    """

    item_ids: tuple[str, ...]
    bias: np.ndarray
    ratio: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "item_ids", tuple(str(i) for i in self.item_ids))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("duplicate items in disclosure")
        if self.bias.shape != (len(self.item_ids),):
            raise ValueError("one bias per item required")
        if self.ratio is not None:
            ratio = np.asarray(self.ratio, dtype=float)
            if ratio.shape != self.bias.shape or np.any(~(ratio >= 0)):
                raise ValueError("one non-negative ratio per item required")
            object.__setattr__(self, "ratio", ratio)

    def __len__(self):
        return len(self.item_ids)

    @property
    def position(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def to_dict(self) -> dict:
        items = []
        for k, i in enumerate(self.item_ids):
            entry = {"id": i, "bias": float(self.bias[k])}
            if self.ratio is not None:
                entry["ratio"] = _ratio_to_json(float(self.ratio[k]))
            items.append(entry)
        return {"items": items}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Disclosure":
        items = doc["items"]
        has_ratio = [("ratio" in it and it["ratio"] is not None) for it in items]
        if any(has_ratio) and not all(has_ratio):
            raise ValueError("ratio must be given for all items or none")
        ratio = None
        if items and all(has_ratio):
            ratio = np.array([_ratio_from_json(it["ratio"]) for it in items])
        return cls(tuple(str(it["id"]) for it in items), np.array([it["bias"] for it in items], float), ratio)

    @classmethod
    def from_json(cls, text: str) -> "Disclosure":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ObfuscatedFeedback:
    revealed: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "revealed", tuple(str(i) for i in self.revealed))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).reshape(-1))
        if len(self.values) != len(self.revealed):
            raise ValueError("one value per revealed item required")
        if len(set(self.revealed)) != len(self.revealed):
            raise ValueError("duplicate revealed items")

    def __len__(self):
        return len(self.revealed)

    def __eq__(self, other):
        if not isinstance(other, ObfuscatedFeedback):
            return NotImplemented
        return self.revealed == other.revealed and np.array_equal(self.values, other.values)

    __hash__ = None

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.revealed, self.values.tolist()))

    def to_dict(self) -> dict:
        return {"revealed": list(self.revealed), "values": self.values.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ObfuscatedFeedback":
        return cls(tuple(doc["revealed"]), np.array(doc["values"], dtype=float))

    @classmethod
    def from_json(cls, text: str) -> "ObfuscatedFeedback":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ProfileEstimate:
    x_hat: np.ndarray
    expected_loss: float
    n_points: int

    def to_dict(self) -> dict:
        return {"x_hat": self.x_hat.tolist(), "expected_loss": self.expected_loss, "n_points": self.n_points}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ProfileEstimate":
        doc = json.loads(text)
        return cls(np.array(doc["x_hat"], float), float(doc["expected_loss"]), int(doc["n_points"]))


@dataclass
class UserSession:
    """User-side record of every round of revealed feedback.

    The private label lives here so the user can obfuscate later rounds,
    but the session offers no serialization: nothing in it is meant to
    leave the user's process.  One owner mutates a session.
    """

    x0: int = field(repr=False)
    rounds: list[tuple[tuple[ExtendedItemProfile, ...], ObfuscatedFeedback]] = field(default_factory=list)

    def __post_init__(self):
        _check_label(self.x0)

    def __getstate__(self):
        raise TypeError("UserSession holds a private label and cannot be serialized")

    @property
    def feedback(self) -> list[ObfuscatedFeedback]:
        return [fb for _, fb in self.rounds]


def mp_disclose(catalog_slice: Sequence[ExtendedItemProfile]) -> Disclosure:
    """Midpoint disclosure: the biases of the solicited items, nothing else."""
    if not catalog_slice:
        raise ValueError("solicited item set is empty")
    return Disclosure(tuple(p.item_id for p in catalog_slice), np.array([p.bias for p in catalog_slice], float))


def rating_ratio(p_plus: float, p_minus: float) -> float:
    """``p_minus / p_plus`` with +inf when only ``p_plus`` is 0 and 1 when both are."""
    if not (0.0 <= p_plus <= 1.0 and 0.0 <= p_minus <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if p_plus > 0.0:
        return p_minus / p_plus
    return math.inf if p_minus > 0.0 else 1.0


def mpss_disclose(
    catalog_slice: Sequence[ExtendedItemProfile],
    rating_probs: Sequence[tuple[float, float]],
) -> Disclosure:
    """Sub-sampling disclosure: biases plus ``rho_j = p_j^- / p_j^+``."""
    if len(rating_probs) != len(catalog_slice):
        raise ValueError("one (p_plus, p_minus) pair per item required")
    base = mp_disclose(catalog_slice)
    ratio = np.array([rating_ratio(pp, pm) for pp, pm in rating_probs], dtype=float)
    return Disclosure(base.item_ids, base.bias, ratio)


def mp_obfuscate(ratings: Sequence[float], x0: int, disclosure: Disclosure) -> ObfuscatedFeedback:
    """Shift every rating by its item's label contribution: ``y_j = r_j - x0 * bias_j``.

    ``ratings`` is aligned with ``disclosure.item_ids``.
    """
    x0 = _check_label(x0)
    r = np.asarray(ratings, dtype=float).reshape(-1)
    if len(r) != len(disclosure):
        raise ValueError(f"got {len(r)} ratings for {len(disclosure)} solicited items")
    return ObfuscatedFeedback(disclosure.item_ids, r - x0 * disclosure.bias)


def keep_probability(rho: float, x0: int) -> float:
    """``min(1, rho ** x0)`` with ``rho = inf`` giving 1 for +1 and 0 for -1."""
    if x0 == 1:
        return min(1.0, rho)
    if rho == 0.0:
        return 1.0
    return min(1.0, 1.0 / rho)


def mpss_obfuscate(
    ratings: Mapping[str, float],
    x0: int,
    disclosure: Disclosure,
    rng: np.random.Generator,
) -> ObfuscatedFeedback:
    """Sub-sample the rated items, then shift the kept ratings as in MP.

    ``ratings`` maps each item the user actually rated (a subset of the
    solicited items) to its rating.  Revealed items keep disclosure order.
    One uniform draw is consumed per rated item.
    """
    x0 = _check_label(x0)
    if disclosure.ratio is None:
        raise ValueError("disclosure carries no ratios; sub-sampling needs them")
    pos = disclosure.position
    unknown = [i for i in ratings if str(i) not in pos]
    if unknown:
        raise KeyError(f"items not in the disclosure: {unknown[:10]}")
    rated = {str(i): float(r) for i, r in ratings.items()}
    revealed, values = [], []
    for k, item in enumerate(disclosure.item_ids):
        if item not in rated:
            continue
        if rng.random() < keep_probability(float(disclosure.ratio[k]), x0):
            revealed.append(item)
            values.append(rated[item] - x0 * disclosure.bias[k])
    return ObfuscatedFeedback(tuple(revealed), np.array(values, dtype=float))


FeedbackLike = Union[ObfuscatedFeedback, UserSession, Iterable[ObfuscatedFeedback]]


def _design(feedback: FeedbackLike, catalog) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(catalog, Mapping):
        profiles = catalog
    else:
        profiles = {p.item_id: p for p in catalog}
    if isinstance(feedback, ObfuscatedFeedback):
        parts = [feedback]
    elif isinstance(feedback, UserSession):
        parts = feedback.feedback
    else:
        parts = list(feedback)
    rows, ys = [], []
    for part in parts:
        for item, y in zip(part.revealed, part.values):
            if item not in profiles:
                raise KeyError(f"no profile for item {item}")
            rows.append(profiles[item].latent)
            ys.append(y)
    if not rows:
        raise ValueError("no feedback to estimate from")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise ValueError("inconsistent latent dimensions")
    return np.vstack(rows), np.asarray(ys, dtype=float)


def solve_normal_equations(V: np.ndarray, y: np.ndarray, ridge: float = DEFAULT_RIDGE):
    """Cholesky solve of ``(V^T V + ridge I) x = V^T y``.

    Returns ``(x, cho_factor)``.  A rank-deficient ``V`` with ``ridge == 0``
    raises :class:`SingularDesignError`.
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    d = V.shape[1]
    A = V.T @ V + ridge * np.eye(d)
    if ridge == 0.0 and np.linalg.matrix_rank(V) < d:
        raise SingularDesignError(f"normal matrix is singular (rank {np.linalg.matrix_rank(V)} < {d})")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(str(exc)) from exc
    return scipy.linalg.cho_solve(factor, V.T @ y), factor


def estimate_profile(
    feedback: FeedbackLike,
    catalog: Mapping[str, ExtendedItemProfile] | Sequence[ExtendedItemProfile],
    ridge: float = DEFAULT_RIDGE,
    noise_sigma: float = 1.0,
) -> ProfileEstimate:
    """Least-squares latent profile from obfuscated feedback.

    ``feedback`` may be a single round, a list of rounds or a
    :class:`UserSession`; all revealed values are pooled into one design.
    ``expected_loss`` is ``noise_sigma**2 * tr[(V^T V + ridge I)^-1]``.
    """
    V, y = _design(feedback, catalog)
    x_hat, factor = solve_normal_equations(V, y, ridge)
    inv = scipy.linalg.cho_solve(factor, np.eye(V.shape[1]))
    return ProfileEstimate(x_hat, float(noise_sigma**2 * np.trace(inv)), len(y))


def theoretical_l2_loss(catalog_slice: Sequence[ExtendedItemProfile], sigma: float) -> float:
    """Expected squared error of the least-squares profile for this item set."""
    V = np.vstack([p.latent for p in catalog_slice])
    eig = np.linalg.eigvalsh(V.T @ V)
    if eig[0] <= eig[-1] * V.shape[1] * np.finfo(float).eps:
        raise SingularDesignError("normal matrix is singular")
    return float(sigma**2 * np.sum(1.0 / eig))


def round_ratings(
    y: Sequence[float], lo: int = 1, hi: int = 5, rng: np.random.Generator | int | None = None
) -> np.ndarray:
    """Randomized rounding to integers in ``[lo, hi]`` that preserves the mean.

    Interior values go up to ``floor(r) + 1`` with probability
    ``r - floor(r)``; values outside the range are truncated.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    y = np.asarray(y, dtype=float)
    return round_with_uniforms(y, rng.random(y.shape), lo, hi)


def round_with_uniforms(y: np.ndarray, u: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """:func:`round_ratings` driven by caller-supplied U[0, 1) draws."""
    if lo > hi:
        raise ValueError("empty rating range")
    clipped = np.clip(np.asarray(y, dtype=float), lo, hi)
    base = np.floor(clipped)
    out = base + (np.asarray(u) < clipped - base)
    return np.clip(out, lo, hi).astype(int)


def binarize_categorical(category: int, K: int) -> np.ndarray:
    """``+1`` at 1-based position ``category``, ``-1`` elsewhere."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 1 <= category <= K:
        raise ValueError(f"category must be in 1..{K}, got {category}")
    out = -np.ones(K)
    out[category - 1] = 1.0
    return out


def transform_categorical_model(
    latent: Sequence[float], category_biases: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite per-category biases ``b^k`` as binary-feature biases.

    Returns ``(latent', bias_vec)`` with ``latent' = (latent, sum_k b^k / 2)``
    and ``bias_vec = b / 2``; a user with binarized label ``z`` then rates
    ``<(x, 1), latent'> + <z, bias_vec>``.
    """
    b = np.asarray(category_biases, dtype=float)
    if b.ndim != 1 or len(b) < 2:
        raise ValueError("need at least two category biases")
    return np.append(np.asarray(latent, dtype=float), b.sum() / 2.0), b / 2.0


def categorical_obfuscate(
    ratings: Sequence[float], binary_label: Sequence[float], bias_vectors: np.ndarray
) -> np.ndarray:
    """``y_j = r_j - <z, b_j>`` for a binarized categorical label ``z``."""
    B = np.atleast_2d(np.asarray(bias_vectors, dtype=float))
    z = np.asarray(binary_label, dtype=float)
    if B.shape[1] != len(z):
        raise ValueError("bias vectors and label have different K")
    r = np.asarray(ratings, dtype=float)
    if len(r) != B.shape[0]:
        raise ValueError("one bias vector per rating required")
    return r - B @ z


def accumulate_session(
    session: UserSession,
    catalog_slice: Sequence[ExtendedItemProfile],
    feedback: ObfuscatedFeedback,
) -> UserSession:
    """Append one round; later estimates pool every round so far."""
    profiles = tuple(catalog_slice)
    known = {p.item_id for p in profiles}
    if not set(feedback.revealed) <= known:
        raise ValueError("feedback reveals items outside this round's slice")
    dims = {len(p.latent) for p in profiles}
    for past, _ in session.rounds:
        dims |= {len(p.latent) for p in past}
    if len(dims) > 1:
        raise ValueError("latent dimension differs across rounds")
    session.rounds.append((profiles, feedback))
    return session


def session_catalog(session: UserSession) -> dict[str, ExtendedItemProfile]:
    out: dict[str, ExtendedItemProfile] = {}
    for profiles, _ in session.rounds:
        out.update({p.item_id: p for p in profiles})
    return out
