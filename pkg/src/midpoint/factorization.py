"""Bias-augmented matrix factorization trained on non-private users.

Each rating is modelled as ``<x_i, v_j> + x_i0 * v_j0 + noise`` where the
user's label ``x_i0`` is known and the item bias ``v_j0`` is estimated up
front from class means.  SGD then fits only the latent vectors.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numba
import numpy as np

from .dataset import RatingsDataset

logger = logging.getLogger(__name__)


class SingleClassItemWarning(UserWarning):
    """An item was rated by users of only one class; its bias was set to 0."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


@dataclass(frozen=True)
class ExtendedItemProfile:
    item_id: str
    bias: float
    latent: np.ndarray

    def __post_init__(self):
        latent = np.asarray(self.latent, dtype=float)
        if latent.ndim != 1:
            raise ValueError("latent must be a vector")
        if not np.any(latent):
            raise ValueError(f"item {self.item_id}: latent vector must be nonzero")
        object.__setattr__(self, "latent", latent)

    def __eq__(self, other):
        if not isinstance(other, ExtendedItemProfile):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.bias == other.bias
            and np.array_equal(self.latent, other.latent)
        )

    __hash__ = None


@dataclass(frozen=True)
class MfHyperparams:
    d: int = 20
    learning_rate: float = 0.01
    regularization: float = 0.1
    epochs: int = 20
    seed: int = 0
    init_scale: float = 0.1
    joint_bias: bool = False

    def __post_init__(self):
        if self.d < 1 or self.epochs < 1:
            raise ValueError("d and epochs must be positive")
        if self.learning_rate <= 0 or self.regularization < 0 or self.init_scale <= 0:
            raise ValueError("learning_rate and init_scale must be > 0, regularization >= 0")


@dataclass(frozen=True)
class AnalystModel:
    catalog: tuple[ExtendedItemProfile, ...]
    p_plus: np.ndarray = field(repr=False)
    p_minus: np.ndarray = field(repr=False)
    noise_sigma_hat: float
    label_name: str | None = None
    loss_history: tuple[float, ...] = field(default=(), repr=False, compare=False)
    user_latent: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.catalog:
            raise ValueError("catalog must be nonempty")
        dims = {p.latent.shape[0] for p in self.catalog}
        if len(dims) != 1:
            raise ValueError("inconsistent latent dimensions across the catalog")
        for arr in (self.p_plus, self.p_minus):
            if len(arr) != len(self.catalog) or np.any((arr < 0) | (arr > 1)):
                raise ValueError("rating probabilities must lie in [0, 1], one per item")
        if not self.noise_sigma_hat >= 0:
            raise ValueError("noise_sigma_hat must be >= 0")

    @property
    def d(self) -> int:
        return self.catalog[0].latent.shape[0]

    @property
    def item_ids(self) -> list[str]:
        return [p.item_id for p in self.catalog]

    @cached_property
    def profiles(self) -> dict[str, ExtendedItemProfile]:
        return {p.item_id: p for p in self.catalog}

    def probs(self, item_id: str) -> tuple[float, float]:
        k = self._position[item_id]
        return float(self.p_plus[k]), float(self.p_minus[k])

    @cached_property
    def _position(self) -> dict[str, int]:
        return {p.item_id: k for k, p in enumerate(self.catalog)}

    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "label_name": self.label_name,
            "items": [
                {
                    "id": p.item_id,
                    "bias": p.bias,
                    "latent": p.latent.tolist(),
                    "p_plus": float(self.p_plus[k]),
                    "p_minus": float(self.p_minus[k]),
                }
                for k, p in enumerate(self.catalog)
            ],
            "noise_sigma_hat": self.noise_sigma_hat,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AnalystModel":
        doc = json.loads(text)
        d = int(doc["d"])
        catalog = []
        for it in doc["items"]:
            if len(it["latent"]) != d:
                raise ValueError(f"item {it['id']}: latent has wrong dimension")
            catalog.append(ExtendedItemProfile(str(it["id"]), float(it["bias"]), np.array(it["latent"], float)))
        return cls(
            catalog=tuple(catalog),
            p_plus=np.array([it["p_plus"] for it in doc["items"]], dtype=float),
            p_minus=np.array([it["p_minus"] for it in doc["items"]], dtype=float),
            noise_sigma_hat=float(doc["noise_sigma_hat"]),
            label_name=doc.get("label_name"),
        )


def compute_biases(train: RatingsDataset) -> dict[str, float]:
    """Half the gap between the +1 and -1 class mean rating of every item.

    Items without ratings from both classes get bias 0 and trigger a
    :class:`SingleClassItemWarning`.
    """
    sums = {i: [0.0, 0.0] for i in train.items}
    counts = {i: [0, 0] for i in train.items}
    labels = {u.user_id: u.private_label for u in train.users}
    for u, i, r in train.ratings:
        label = labels[u]
        if label is None:
            continue
        slot = 0 if label == 1 else 1
        sums[i][slot] += r
        counts[i][slot] += 1
    biases, lopsided = {}, []
    for i in train.items:
        n_plus, n_minus = counts[i]
        if n_plus and n_minus:
            biases[i] = (sums[i][0] / n_plus - sums[i][1] / n_minus) / 2.0
        else:
            biases[i] = 0.0
            if n_plus or n_minus:
                lopsided.append(i)
    if lopsided:
        warnings.warn(
            f"{len(lopsided)} item(s) rated by one class only got bias 0: {lopsided[:10]}",
            SingleClassItemWarning,
            stacklevel=2,
        )
    return biases


@numba.njit(cache=True)
def _sgd_epoch(users, items, ratings, labels, order, x, v, v0, lr, reg, joint_bias):
    d = x.shape[1]
    for t in range(order.shape[0]):
        k = order[t]
        i, j = users[k], items[k]
        pred = labels[i] * v0[j]
        for f in range(d):
            pred += x[i, f] * v[j, f]
        err = ratings[k] - pred
        for f in range(d):
            xf = x[i, f]
            x[i, f] += lr * (err * v[j, f] - reg * xf)
            v[j, f] += lr * (err * xf - reg * v[j, f])
        if joint_bias:
            v0[j] += lr * err * labels[i]


def _objective(users, items, ratings, labels, x, v, v0, reg):
    pred = np.einsum("kf,kf->k", x[users], v[items]) + labels[users] * v0[items]
    sq = float(np.sum((ratings - pred) ** 2))
    # per-rating penalty: the quantity the SGD updates descend
    penalty = float(np.sum(np.sum(x * x, axis=1)[users]) + np.sum(np.sum(v * v, axis=1)[items]))
    return sq, sq + reg * penalty


def train_mf(
    train: RatingsDataset, biases: Mapping[str, float], hp: MfHyperparams = MfHyperparams()
) -> AnalystModel:
    """Fit item latent vectors by SGD with user labels and item biases frozen.

    Only labeled users take part.  With ``hp.joint_bias`` the item biases
    are learned jointly starting from ``biases`` instead of staying fixed.
    """
    missing = [i for i in train.items if i not in biases]
    if missing:
        raise ValueError(f"biases missing for items {missing[:10]}")
    user_ids = train.labeled_users()
    if not user_ids:
        raise ValueError("training set has no labeled users")
    u_pos = {u: k for k, u in enumerate(user_ids)}
    i_pos = {i: k for k, i in enumerate(train.items)}
    label_arr = np.array([train.label(u) for u in user_ids], dtype=float)

    triples = [(u_pos[u], i_pos[i], r) for u, i, r in train.ratings if u in u_pos]
    users = np.array([t[0] for t in triples], dtype=np.int64)
    items = np.array([t[1] for t in triples], dtype=np.int64)
    ratings = np.array([t[2] for t in triples], dtype=float)

    rng = np.random.default_rng(hp.seed)
    x = rng.standard_normal((len(user_ids), hp.d)) * hp.init_scale
    v = rng.standard_normal((len(train.items), hp.d)) * hp.init_scale
    v0 = np.array([biases[i] for i in train.items], dtype=float)

    history = []
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(ratings))
        _sgd_epoch(users, items, ratings, label_arr, order, x, v, v0,
                   hp.learning_rate, hp.regularization, hp.joint_bias)
        sq, obj = _objective(users, items, ratings, label_arr, x, v, v0, hp.regularization)
        if not (np.isfinite(obj) and np.all(np.isfinite(v))):
            raise TrainingDiverged(epoch)
        history.append(obj)
        logger.debug("epoch %d objective %.6f", epoch, obj)

    for j in range(len(train.items)):
        while not np.any(v[j]):
            v[j] = rng.standard_normal(hp.d) * hp.init_scale

    class_sizes = [(label_arr == 1).sum(), (label_arr == -1).sum()]
    rated_by = np.zeros((2, len(train.items)))
    for u, i in zip(users, items):
        rated_by[0 if label_arr[u] == 1 else 1, i] += 1
    p_plus = rated_by[0] / class_sizes[0] if class_sizes[0] else np.zeros(len(train.items))
    p_minus = rated_by[1] / class_sizes[1] if class_sizes[1] else np.zeros(len(train.items))

    sq, _ = _objective(users, items, ratings, label_arr, x, v, v0, hp.regularization)
    sigma_hat = float(np.sqrt(sq / len(ratings))) if len(ratings) else 0.0
    catalog = tuple(
        ExtendedItemProfile(i, float(v0[k]), v[k].copy()) for k, i in enumerate(train.items)
    )
    return AnalystModel(
        catalog, p_plus, p_minus, sigma_hat, train.label_name, tuple(history), dict(zip(user_ids, x))
    )


def predict_rating(x_hat: Sequence[float], x0_hat: float, profile: ExtendedItemProfile) -> float:
    """Predicted rating ``<x_hat, latent> + x0_hat * bias``.

    Privacy-conscious users are predicted with ``x0_hat = 0``, the midpoint
    of the two labels.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != profile.latent.shape:
        raise ValueError(f"dimension mismatch: {x_hat.shape} vs {profile.latent.shape}")
    return float(x_hat @ profile.latent + x0_hat * profile.bias)
