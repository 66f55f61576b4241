"""Cross-validated privacy-risk (AUC) and accuracy (RMSE) measurements.

Per fold the analyst trains on the other folds' users, who reveal their
labels.  Each test user's ratings are split into an observed part, which
is obfuscated under every scheme and attacked, and a holdout part that
the analyst predicts from the estimated profile.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import RatingsDataset, split_folds, split_user_ratings
from .factorization import (
    AnalystModel,
    MfHyperparams,
    SingleClassItemWarning,
    compute_biases,
    predict_rating,
    train_mf,
)
from .inference import (
    auc,
    dense_inputs,
    logistic_score,
    logistic_train,
    lse_attack,
    nb_score,
    nb_train,
)
from .protocol import (
    DEFAULT_RIDGE,
    ObfuscatedFeedback,
    estimate_profile,
    keep_probability,
    rating_ratio,
    round_with_uniforms,
)
from .seeding import derive_int, derive_rng

logger = logging.getLogger(__name__)

SCHEME_NAMES = ("NO", "MP", "MPr", "IA", "FA", "SS", "MPSS", "MPSSr", "SS_IA", "SS_FA")
ATTACKERS = ("LSE", "LR", "NB")

_TRANSFORM = {
    "NO": "none", "SS": "none",
    "MP": "mp", "MPr": "mp", "MPSS": "mp", "MPSSr": "mp",
    "IA": "ia", "SS_IA": "ia",
    "FA": "fa", "SS_FA": "fa",
}


@dataclass(frozen=True)
class Scheme:
    """An obfuscation scheme applied to each rating with probability ``alpha``."""

    name: str
    alpha: float = 1.0
    rating_range: tuple[int, int] = (1, 5)

    def __post_init__(self):
        if self.name not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {self.name!r}; expected one of {SCHEME_NAMES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        lo, hi = self.rating_range
        if self.rounds and (int(lo) != lo or int(hi) != hi or lo > hi):
            raise ValueError("rounding schemes need an integer rating range")

    @property
    def subsamples(self) -> bool:
        return self.name in ("SS", "MPSS", "MPSSr", "SS_IA", "SS_FA")

    @property
    def rounds(self) -> bool:
        return self.name in ("MPr", "MPSSr")

    @property
    def transform(self) -> str:
        return _TRANSFORM[self.name]

    @property
    def label(self) -> str:
        return self.name if self.alpha == 1.0 else f"{self.name}@{self.alpha:g}"

    def effective(self) -> "Scheme":
        """With ``alpha == 0`` nothing is obfuscated, which is scheme NO."""
        return replace(self, name="NO", alpha=1.0) if self.alpha == 0.0 else self


@dataclass(frozen=True)
class TrainingStats:
    """Training-set means used by the item-average and feature-average schemes."""

    item_mean: Mapping[str, float]
    class_mean: Mapping[str, tuple[float, float]]

    @classmethod
    def from_dataset(cls, train: RatingsDataset) -> "TrainingStats":
        sums: dict[str, list[float]] = {i: [0.0, 0.0, 0.0] for i in train.items}
        counts: dict[str, list[int]] = {i: [0, 0, 0] for i in train.items}
        labels = {u.user_id: u.private_label for u in train.users}
        for u, i, r in train.ratings:
            sums[i][0] += r
            counts[i][0] += 1
            if labels[u] in (1, -1):
                slot = 1 if labels[u] == 1 else 2
                sums[i][slot] += r
                counts[i][slot] += 1
        overall = float(np.mean([r for _, _, r in train.ratings])) if train.ratings else 0.0
        item_mean, class_mean = {}, {}
        for i in train.items:
            mean = sums[i][0] / counts[i][0] if counts[i][0] else overall
            item_mean[i] = mean
            class_mean[i] = tuple(
                sums[i][s] / counts[i][s] if counts[i][s] else mean for s in (1, 2)
            )
        return cls(item_mean, class_mean)


def apply_scheme(
    scheme: Scheme,
    ratings: Mapping[str, float],
    x0: int,
    model: AnalystModel,
    rng: np.random.Generator,
    stats: TrainingStats | None = None,
) -> ObfuscatedFeedback:
    """Obfuscate one user's ratings.

    Four uniforms per rating are always drawn (sub-sampling, rounding, FA
    coin, mixing), so the stream consumed does not depend on ``alpha``.
    A rating left unmixed is revealed raw.
    """
    if x0 not in (1, -1):
        raise ValueError("x0 must be +1 or -1")
    profiles = model.profiles
    items = [str(i) for i in ratings]
    unknown = [i for i in items if i not in profiles]
    if unknown:
        raise KeyError(f"unknown items: {unknown[:10]}")
    if scheme.transform in ("ia", "fa") and stats is None:
        raise ValueError(f"scheme {scheme.name} needs training statistics")
    n = len(items)
    u_keep, u_round, u_coin, u_mix = (rng.random(n) for _ in range(4))
    lo, hi = scheme.rating_range
    revealed, values = [], []
    for k, item in enumerate(items):
        r = float(ratings[item])
        if not u_mix[k] < scheme.alpha:
            revealed.append(item)
            values.append(r)
            continue
        if scheme.subsamples:
            rho = rating_ratio(*model.probs(item))
            if not u_keep[k] < keep_probability(rho, x0):
                continue
        transform = scheme.transform
        if transform == "mp":
            value = r - x0 * profiles[item].bias
            if scheme.rounds:
                value = float(round_with_uniforms(np.array([value]), u_round[k:k + 1], lo, hi)[0])
        elif transform == "ia":
            value = stats.item_mean[item]
        elif transform == "fa":
            plus, minus = stats.class_mean[item]
            value = plus if u_coin[k] < 0.5 else minus
        else:
            value = r
        revealed.append(item)
        values.append(value)
    return ObfuscatedFeedback(tuple(revealed), np.array(values, dtype=float))


def rmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p, a = np.asarray(predicted, dtype=float), np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((p - a) ** 2)))


@dataclass(frozen=True)
class ExperimentConfig:
    folds: int = 10
    split_fraction: float = 0.7
    schemes: tuple[Scheme, ...] = tuple(Scheme(n) for n in SCHEME_NAMES)
    attackers: tuple[str, ...] = ATTACKERS
    mf: MfHyperparams = MfHyperparams()
    seed: int = 0
    ridge: float = DEFAULT_RIDGE
    x0_policy: str = "midpoint"
    rating_range: tuple[int, int] = (1, 5)
    lr_l2: float = 1.0
    lr_epochs: int = 300
    nb_alpha: float = 1.0
    jobs: int = 1

    def __post_init__(self):
        bad = [a for a in self.attackers if a not in ATTACKERS]
        if bad:
            raise ValueError(f"unknown attackers {bad}")
        if self.x0_policy not in ("midpoint", "lse"):
            raise ValueError("x0_policy must be 'midpoint' or 'lse'")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        doc = dict(doc)
        rating_range = tuple(doc.pop("rating_range", (1, 5)))
        kwargs = {"rating_range": rating_range}
        if "schemes" in doc:
            schemes = []
            for s in doc.pop("schemes"):
                if isinstance(s, str):
                    s = {"name": s}
                schemes.append(Scheme(s["name"], float(s.get("alpha", 1.0)), tuple(s.get("rating_range", rating_range))))
            kwargs["schemes"] = tuple(schemes)
        else:
            kwargs["schemes"] = tuple(Scheme(n, rating_range=rating_range) for n in SCHEME_NAMES)
        if "attackers" in doc:
            kwargs["attackers"] = tuple(doc.pop("attackers"))
        if "mf" in doc:
            kwargs["mf"] = MfHyperparams(**doc.pop("mf"))
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        kwargs.update(doc)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schemes"] = [asdict(s) for s in self.schemes]
        return out


@dataclass
class Report:
    auc: dict[tuple[int, str, str], float] = field(default_factory=dict)
    rmse: dict[tuple[int, str], float] = field(default_factory=dict)
    drop_ratios: dict[str, list[float]] = field(default_factory=dict)

    @property
    def schemes(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, s in self.rmse:
            seen.setdefault(s, None)
        return list(seen)

    def mean_auc(self, scheme: str, attacker: str) -> float:
        vals = [v for (f, s, a), v in self.auc.items() if s == scheme and a == attacker]
        return float(np.mean(vals))

    def mean_rmse(self, scheme: str) -> float:
        return float(np.mean([v for (f, s), v in self.rmse.items() if s == scheme]))

    def drop_summary(self, scheme: str) -> dict:
        return summarize_ratios(self.drop_ratios.get(scheme, []))

    def summary(self) -> dict:
        out = {}
        attackers = sorted({a for (_, _, a) in self.auc}, key=ATTACKERS.index)
        for s in self.schemes:
            entry = {"rmse": self.mean_rmse(s), "auc": {a: self.mean_auc(s, a) for a in attackers}}
            if s in self.drop_ratios:
                entry["drop_ratio"] = self.drop_summary(s)
            out[s] = entry
        return out

    def to_json(self) -> str:
        doc = {
            "folds": [
                {"fold": f, "scheme": s, "attacker": a, "auc": v} for (f, s, a), v in self.auc.items()
            ],
            "rmse": [{"fold": f, "scheme": s, "rmse": v} for (f, s), v in self.rmse.items()],
            "summary": self.summary(),
        }
        return json.dumps(doc, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "scheme", "attacker", "auc", "rmse"])
        for (f, s, a), v in self.auc.items():
            writer.writerow([f, s, a, repr(v), repr(self.rmse[(f, s)])])
        attacked = {(f, s) for (f, s, _) in self.auc}
        for (f, s), v in self.rmse.items():
            if (f, s) not in attacked:
                writer.writerow([f, s, "", "", repr(v)])
        return buf.getvalue()


def summarize_ratios(ratios: Sequence[float]) -> dict:
    r = np.asarray(ratios, dtype=float)
    if r.size == 0:
        return {"n": 0}
    q = np.quantile(r, [0.1, 0.25, 0.5, 0.75, 0.9])
    return {
        "n": int(r.size),
        "mean": float(r.mean()),
        "max": float(r.max()),
        "fraction_full": float(np.mean(r == 0.0)),
        "quantiles": {k: float(v) for k, v in zip(("0.1", "0.25", "0.5", "0.75", "0.9"), q)},
    }


def _nb_matrix(X: np.ndarray, rated: np.ndarray, lo: int, hi: int) -> np.ndarray:
    # levels 1..(hi - lo + 1) for ratings, 0 for unrated
    levels = np.clip(np.rint(X), lo, hi) - lo + 1
    return np.where(rated, levels, 0.0)


def _infer_and_predict(scheme, feedback, model, holdout, config):
    profiles = model.profiles
    revealed_profiles = [profiles[i] for i in feedback.revealed]
    d = model.d
    if len(feedback) == 0:
        lse = None
        x_hat, x0_hat = np.zeros(d), 0.0
    else:
        lse = lse_attack(feedback.values, revealed_profiles, config.ridge)
        if scheme.transform == "mp":
            x_hat = estimate_profile(feedback, profiles, config.ridge, model.noise_sigma_hat).x_hat
            x0_hat = 0.0 if config.x0_policy == "midpoint" else float(lse.label)
        else:
            x_hat, x0_hat = lse.x_hat, float(lse.label)
    preds = [predict_rating(x_hat, x0_hat, profiles[i]) for i in holdout]
    return (lse.score if lse is not None else 0.0), preds


def _run_fold(dataset: RatingsDataset, fold: int, test_users: list[str], config: ExperimentConfig):
    test = set(test_users)
    train = dataset.subset([u for u in dataset.labeled_users() if u not in test])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingleClassItemWarning)
        biases = compute_biases(train)
    model = train_mf(train, biases, replace(config.mf, seed=derive_int(config.seed, "mf", fold)))
    stats = TrainingStats.from_dataset(train)
    item_ids = list(dataset.items)
    lo, hi = config.rating_range

    lr_model = nb_model = None
    if "LR" in config.attackers or "NB" in config.attackers:
        train_users = train.labeled_users()
        X = dense_inputs([train.user_ratings(u) for u in train_users], item_ids)
        y = [train.label(u) for u in train_users]
        if "LR" in config.attackers:
            lr_model = logistic_train(X, y, config.lr_l2, config.lr_epochs, derive_int(config.seed, "lr", fold))
        if "NB" in config.attackers:
            rated = dense_inputs([{i: 1.0 for i in train.user_ratings(u)} for u in train_users], item_ids) > 0
            nb_model = nb_train(_nb_matrix(X, rated, lo, hi), y, config.nb_alpha,
                                levels=range(0, hi - lo + 2))

    labels: list[int] = []
    scores = {(s.label, a): [] for s in config.schemes for a in config.attackers}
    sq_err = {s.label: [0.0, 0] for s in config.schemes}
    drops = {s.label: [] for s in config.schemes if s.subsamples and s.alpha > 0}
    for user in test_users:
        ratings = dataset.user_ratings(user)
        if len(ratings) < 2:
            continue
        x0 = dataset.label(user)
        observed, holdout = split_user_ratings(ratings, config.split_fraction, derive_rng(config.seed, "split", fold, user))
        labels.append(x0)
        for scheme in config.schemes:
            rng = derive_rng(config.seed, "scheme", scheme.name, "user", user)
            eff = scheme.effective()
            feedback = apply_scheme(eff, observed, x0, model, rng, stats)
            lse_score, preds = _infer_and_predict(eff, feedback, model, list(holdout), config)
            err = np.asarray(preds) - np.array(list(holdout.values()))
            sq_err[scheme.label][0] += float(err @ err)
            sq_err[scheme.label][1] += len(err)
            if scheme.label in drops:
                drops[scheme.label].append(1.0 - len(feedback) / len(observed))
            revealed = feedback.as_dict()
            if "LSE" in config.attackers:
                scores[(scheme.label, "LSE")].append(lse_score)
            if lr_model is not None:
                scores[(scheme.label, "LR")].append(float(logistic_score(lr_model, dense_inputs([revealed], item_ids))[0]))
            if nb_model is not None:
                row = dense_inputs([revealed], item_ids)
                mask = dense_inputs([{i: 1.0 for i in revealed}], item_ids) > 0
                scores[(scheme.label, "NB")].append(float(nb_score(nb_model, _nb_matrix(row, mask, lo, hi))[0]))

    if len(set(labels)) < 2:
        raise ValueError(f"fold {fold} has test users of one class only; too few labeled users")
    auc_out = {(fold, s, a): auc(v, labels) for (s, a), v in scores.items()}
    rmse_out = {(fold, s): float(np.sqrt(t / n)) for s, (t, n) in sq_err.items()}
    return auc_out, rmse_out, drops


def run_experiment(dataset: RatingsDataset, config: ExperimentConfig = ExperimentConfig()) -> Report:
    """Cross-validated AUC per (fold, scheme, attacker) and RMSE per (fold, scheme)."""
    labeled = dataset.labeled_users()
    if len(labeled) < 2 * config.folds:
        raise ValueError(f"{len(labeled)} labeled users are too few for {config.folds} folds")
    folds = split_folds(dataset, config.folds, derive_int(config.seed, "folds"))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(_run_fold, dataset, f, users, config) for f, users in enumerate(folds)]
            results = [fut.result() for fut in futures]
    else:
        results = [_run_fold(dataset, f, users, config) for f, users in enumerate(folds)]
    report = Report()
    for auc_out, rmse_out, drops in results:
        report.auc.update(auc_out)
        report.rmse.update(rmse_out)
        for s, r in drops.items():
            report.drop_ratios.setdefault(s, []).extend(r)
    return report


@dataclass(frozen=True)
class CurvePoint:
    alpha: float
    auc_lse: float
    rmse: float


def tradeoff_sweep(
    dataset: RatingsDataset,
    scheme: str,
    alphas: Sequence[float] = tuple(np.round(np.arange(0, 1.01, 0.1), 1)),
    config: ExperimentConfig = ExperimentConfig(),
) -> list[CurvePoint]:
    """LSE AUC and RMSE of ``scheme`` applied with probability alpha, per alpha."""
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    points = []
    for alpha in alphas:
        s = Scheme(scheme, float(alpha), config.rating_range)
        report = run_experiment(dataset, replace(config, schemes=(s,), attackers=("LSE",)))
        points.append(CurvePoint(float(alpha), report.mean_auc(s.label, "LSE"), report.mean_rmse(s.label)))
    return points


def curve_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "auc_lse", "rmse"])
    for p in points:
        writer.writerow([repr(p.alpha), repr(p.auc_lse), repr(p.rmse)])
    return buf.getvalue()


@dataclass(frozen=True)
class DropStats:
    user_ids: tuple[str, ...]
    labels: np.ndarray
    ratios: np.ndarray

    def summary(self, label: int | None = None) -> dict:
        r = self.ratios if label is None else self.ratios[self.labels == label]
        return summarize_ratios(r)

    def to_json(self) -> str:
        return json.dumps({"all": self.summary(), "plus": self.summary(1), "minus": self.summary(-1)}, indent=1)


def drop_ratio_stats(dataset: RatingsDataset, model: AnalystModel, rng: np.random.Generator) -> DropStats:
    """Fraction ``|S0 - S_R| / |S0|`` of each labeled user's rated items that sub-sampling withholds."""
    profiles = model.profiles
    ids, labels, ratios = [], [], []
    for user in dataset.labeled_users():
        x0 = dataset.label(user)
        rated = [i for i in dataset.user_ratings(user) if i in profiles]
        if not rated:
            continue
        u = rng.random(len(rated))
        kept = sum(u[k] < keep_probability(rating_ratio(*model.probs(i)), x0) for k, i in enumerate(rated))
        ids.append(user)
        labels.append(x0)
        ratios.append(1.0 - kept / len(rated))
    return DropStats(tuple(ids), np.array(labels, dtype=int), np.array(ratios, dtype=float))
