"""Rating datasets: parsing, cross-validation splits and a synthetic generator.

Ratings are kept as ``(user_id, item_id, rating)`` triples with string ids.
Private labels are encoded as ``+1`` / ``-1``; ``None`` marks a user whose
label is unknown.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RATING_RANGE = (1.0, 5.0)
DEFAULT_LABEL_MAP = {"1": 1, "+1": 1, "-1": -1, "M": 1, "F": -1}


class ParseError(ValueError):
    """Input could not be turned into a dataset.

    ``lines`` holds the 1-based line numbers at fault.
    """

    def __init__(self, message: str, lines: Sequence[int] = ()):
        self.lines = tuple(lines)
        if self.lines:
            message = f"{message} (lines {', '.join(map(str, self.lines))})"
        super().__init__(message)


class MalformedRowsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    private_label: int | None
    rated_items: frozenset[str]


@dataclass(frozen=True)
class RatingsDataset:
    users: tuple[UserRecord, ...]
    items: tuple[str, ...]
    ratings: tuple[tuple[str, str, float], ...]
    label_name: str | None = None

    def __post_init__(self):
        user_ids = [u.user_id for u in self.users]
        if len(set(user_ids)) != len(user_ids):
            raise ValueError("duplicate user ids")
        if len(set(self.items)) != len(self.items):
            raise ValueError("duplicate item ids")
        known_users, known_items = set(user_ids), set(self.items)
        seen = set()
        rated: dict[str, set[str]] = {u: set() for u in user_ids}
        for u, i, _ in self.ratings:
            if u not in known_users or i not in known_items:
                raise ValueError(f"rating ({u}, {i}) references an unknown user or item")
            if (u, i) in seen:
                raise ValueError(f"duplicate rating for ({u}, {i})")
            seen.add((u, i))
            rated[u].add(i)
        for user in self.users:
            if user.private_label not in (None, 1, -1):
                raise ValueError(f"label of user {user.user_id} must be +1, -1 or None")
            if set(user.rated_items) != rated[user.user_id]:
                raise ValueError(f"rated_items of user {user.user_id} disagree with the ratings")

    @classmethod
    def from_triples(
        cls,
        triples: Iterable[tuple[str, str, float]],
        labels: Mapping[str, int | None] | None = None,
        label_name: str | None = None,
        extra_users: Iterable[str] = (),
    ) -> "RatingsDataset":
        """Build a dataset, deriving users and items in first-seen order."""
        triples = tuple((str(u), str(i), float(r)) for u, i, r in triples)
        labels = dict(labels or {})
        user_order: dict[str, set[str]] = {}
        item_order: dict[str, None] = {}
        for u, i, _ in triples:
            user_order.setdefault(u, set()).add(i)
            item_order.setdefault(i, None)
        for u in extra_users:
            user_order.setdefault(str(u), set())
        users = tuple(
            UserRecord(u, labels.get(u), frozenset(items)) for u, items in user_order.items()
        )
        return cls(users, tuple(item_order), triples, label_name)

    @cached_property
    def user_index(self) -> dict[str, UserRecord]:
        return {u.user_id: u for u in self.users}

    @cached_property
    def _by_user(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {u.user_id: {} for u in self.users}
        for u, i, r in self.ratings:
            out[u][i] = r
        return out

    def user_ratings(self, user_id: str) -> dict[str, float]:
        """Item -> rating for one user, in file order."""
        return dict(self._by_user[user_id])

    def label(self, user_id: str) -> int | None:
        return self.user_index[user_id].private_label

    def labeled_users(self) -> list[str]:
        return [u.user_id for u in self.users if u.private_label is not None]

    def subset(self, user_ids: Iterable[str]) -> "RatingsDataset":
        """Restrict to the given users, keeping the full item catalog."""
        keep = set(user_ids)
        users = tuple(u for u in self.users if u.user_id in keep)
        ratings = tuple(t for t in self.ratings if t[0] in keep)
        return RatingsDataset(users, self.items, ratings, self.label_name)

    def to_double_colon(self) -> bytes:
        lines = [f"{u}::{i}::{_fmt(r)}" for u, i, r in self.ratings]
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["user_id", "item_id", "rating"])
        for u, i, r in self.ratings:
            writer.writerow([u, i, _fmt(r)])
        return buf.getvalue().encode("utf-8")

    def labels_csv(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["user_id", "label"])
        for user in self.users:
            if user.private_label is not None:
                writer.writerow([user.user_id, user.private_label])
        return buf.getvalue().encode("utf-8")


def _fmt(r: float) -> str:
    return str(int(r)) if float(r).is_integer() and abs(r) < 2**53 else repr(float(r))


def _read_text(source: bytes | str | BinaryIO) -> str:
    if isinstance(source, str):
        return source
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        try:
            data = source.read()
        except (OSError, AttributeError) as exc:
            raise ParseError(f"unreadable stream: {exc}") from exc
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"stream is not valid UTF-8: {exc}") from exc


def parse_ratings(
    source: bytes | str | BinaryIO,
    format: str = "doublecolon",
    rating_range: tuple[float, float] | None = DEFAULT_RATING_RANGE,
    labels: Mapping[str, int | None] | None = None,
    label_name: str | None = None,
    strict: bool = False,
) -> RatingsDataset:
    """Parse ``user::item::rating`` lines or a ``user_id,item_id,rating`` CSV.

    Malformed rows are skipped and reported through a
    :class:`MalformedRowsWarning` (or raised when ``strict``).  Out-of-range
    ratings and repeated (user, item) pairs are always errors.
    """
    fmt = format.lower().replace("_", "")
    if fmt not in ("doublecolon", "csv"):
        raise ValueError(f"unknown format {format!r}")
    text = _read_text(source)
    rows: list[tuple[int, list[str]]] = []
    lines = text.splitlines()
    if fmt == "doublecolon":
        for lineno, line in enumerate(lines, start=1):
            if line.strip():
                rows.append((lineno, line.strip().split("::")))
    else:
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is not None:
            header = [h.strip() for h in header]
            if header[:3] != ["user_id", "item_id", "rating"]:
                raise ParseError("CSV header must start with user_id,item_id,rating", [1])
            for lineno, row in enumerate(reader, start=2):
                if any(cell.strip() for cell in row):
                    rows.append((lineno, row))

    malformed, out_of_range = [], []
    first_seen: dict[tuple[str, str], int] = {}
    duplicates: list[int] = []
    triples = []
    for lineno, parts in rows:
        if len(parts) < 3 or not parts[0].strip() or not parts[1].strip():
            malformed.append(lineno)
            continue
        user, item = parts[0].strip(), parts[1].strip()
        try:
            rating = float(parts[2])
        except ValueError:
            malformed.append(lineno)
            continue
        if not np.isfinite(rating):
            malformed.append(lineno)
            continue
        if rating_range is not None and not rating_range[0] <= rating <= rating_range[1]:
            out_of_range.append(lineno)
            continue
        if (user, item) in first_seen:
            duplicates.append(lineno)
            continue
        first_seen[(user, item)] = lineno
        triples.append((user, item, rating))

    if duplicates:
        raise ParseError("duplicate (user, item) pairs", duplicates)
    if out_of_range:
        raise ParseError(f"ratings outside {rating_range}", out_of_range)
    if malformed:
        if strict:
            raise ParseError("malformed rows", malformed)
        warnings.warn(
            f"skipped malformed rows at lines {', '.join(map(str, malformed))}",
            MalformedRowsWarning,
            stacklevel=2,
        )
    return RatingsDataset.from_triples(triples, labels, label_name)


def parse_labels(
    source: bytes | str | BinaryIO,
    label_map: Mapping[str, int] | None = None,
) -> dict[str, int | None]:
    """Read a ``user_id,label`` CSV; unmapped labels become unknown (None)."""
    label_map = dict(DEFAULT_LABEL_MAP if label_map is None else label_map)
    reader = csv.reader(_read_text(source).splitlines())
    header = next(reader, None)
    if header is None:
        return {}
    if [h.strip() for h in header[:2]] != ["user_id", "label"]:
        raise ParseError("label CSV header must be user_id,label", [1])
    out: dict[str, int | None] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < 2:
            raise ParseError("malformed label row", [lineno])
        out[row[0].strip()] = label_map.get(row[1].strip())
    return out


def parse_movielens_users(
    source: bytes | str | BinaryIO, attribute: str = "gender"
) -> dict[str, int | None]:
    """Labels from a MovieLens-1M ``users.dat``.

    ``gender``: M -> +1, F -> -1.  ``age``: 18-34 -> +1, 35-55 -> -1, other
    age groups unknown.
    """
    out: dict[str, int | None] = {}
    for line in _read_text(source).splitlines():
        parts = line.strip().split("::")
        if len(parts) < 3:
            continue
        if attribute == "gender":
            out[parts[0]] = {"M": 1, "F": -1}.get(parts[1])
        elif attribute == "age":
            age = int(parts[2])
            out[parts[0]] = 1 if 18 <= age < 35 else (-1 if 35 <= age < 56 else None)
        else:
            raise ValueError(f"unknown attribute {attribute!r}")
    return out


def with_labels(
    dataset: RatingsDataset, labels: Mapping[str, int | None], label_name: str | None = None
) -> RatingsDataset:
    users = tuple(
        UserRecord(u.user_id, labels.get(u.user_id), u.rated_items) for u in dataset.users
    )
    return RatingsDataset(users, dataset.items, dataset.ratings, label_name or dataset.label_name)


def filter_min_counts(
    dataset: RatingsDataset, min_user_ratings: int = 0, min_item_ratings: int = 0
) -> RatingsDataset:
    """Drop rarely rated items, then users with too few remaining ratings."""
    item_counts: dict[str, int] = {}
    for _, i, _ in dataset.ratings:
        item_counts[i] = item_counts.get(i, 0) + 1
    items = {i for i, c in item_counts.items() if c >= min_item_ratings}
    kept = [t for t in dataset.ratings if t[1] in items]
    user_counts: dict[str, int] = {}
    for u, _, _ in kept:
        user_counts[u] = user_counts.get(u, 0) + 1
    users = {u for u, c in user_counts.items() if c >= min_user_ratings}
    kept = [t for t in kept if t[0] in users]
    labels = {u.user_id: u.private_label for u in dataset.users}
    return RatingsDataset.from_triples(kept, labels, dataset.label_name)


def split_folds(dataset: RatingsDataset, k: int, seed: int) -> list[list[str]]:
    """Partition the labeled users into ``k`` folds whose sizes differ by at most one."""
    users = dataset.labeled_users()
    if not isinstance(k, (int, np.integer)) or k < 1 or k > len(users):
        raise ValueError(f"k must be in [1, {len(users)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(users))
    return [[users[i] for i in chunk] for chunk in np.array_split(order, k)]


def split_user_ratings(
    ratings: Mapping[str, float] | Sequence[tuple[str, float]],
    fraction: float,
    seed: int | np.random.Generator,
) -> tuple[dict[str, float], dict[str, float]]:
    """Randomly split one user's ratings into (observed, holdout).

    ``|observed| = round(fraction * n)``, clamped so neither side is empty.
    """
    pairs = list(ratings.items()) if isinstance(ratings, Mapping) else list(ratings)
    n = len(pairs)
    if n < 2:
        raise ValueError(f"need at least 2 ratings to split, got {n}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n_obs = min(max(int(np.floor(fraction * n + 0.5)), 1), n - 1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = set(rng.permutation(n)[:n_obs].tolist())
    observed = {pairs[k][0]: pairs[k][1] for k in range(n) if k in chosen}
    holdout = {pairs[k][0]: pairs[k][1] for k in range(n) if k not in chosen}
    return observed, holdout


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic linear rating model.

    ``prob_model`` is ``"dense"`` (every item rated), ``"uniform"`` (each of
    p+ and p- drawn from U[prob_low, prob_high] per item) or ``"fixed"``
    (explicit ``p_plus`` / ``p_minus`` lists).  With ``paired`` users come in
    consecutive pairs sharing the latent profile with opposite labels.
    """

    n_users: int
    n_items: int
    d: int
    noise_sigma: float = 0.5
    bias_scale: float = 1.0
    prob_model: str = "dense"
    prob_low: float = 0.1
    prob_high: float = 0.9
    p_plus: tuple[float, ...] | None = None
    p_minus: tuple[float, ...] | None = None
    paired: bool = False

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.d) < 1:
            raise ValueError("n_users, n_items and d must be positive")
        if self.noise_sigma < 0 or self.bias_scale < 0:
            raise ValueError("noise_sigma and bias_scale must be non-negative")
        if self.prob_model not in ("dense", "uniform", "fixed"):
            raise ValueError(f"unknown prob_model {self.prob_model!r}")
        if not 0.0 <= self.prob_low <= self.prob_high <= 1.0:
            raise ValueError("need 0 <= prob_low <= prob_high <= 1")
        if self.prob_model == "fixed":
            if self.p_plus is None or self.p_minus is None:
                raise ValueError("fixed prob_model needs p_plus and p_minus")
            if len(self.p_plus) != self.n_items or len(self.p_minus) != self.n_items:
                raise ValueError("p_plus / p_minus must have n_items entries")
            if not all(0.0 <= p <= 1.0 for p in (*self.p_plus, *self.p_minus)):
                raise ValueError("probabilities must lie in [0, 1]")
        if self.paired and self.n_users % 2:
            raise ValueError("paired generation needs an even n_users")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticConfig":
        data = dict(data)
        for key in ("p_plus", "p_minus"):
            if data.get(key) is not None:
                data[key] = tuple(float(p) for p in data[key])
        return cls(**data)


@dataclass(frozen=True)
class SyntheticGroundTruth:
    item_ids: tuple[str, ...]
    item_bias: np.ndarray = field(repr=False)
    item_latent: np.ndarray = field(repr=False)
    user_ids: tuple[str, ...]
    user_label: np.ndarray = field(repr=False)
    user_latent: np.ndarray = field(repr=False)
    noise_sigma: float
    p_plus: np.ndarray = field(repr=False)
    p_minus: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(np.all(self.item_latent == 0.0, axis=1)):
            raise ValueError("item latent vectors must be nonzero")
        if self.item_latent.shape[1] != self.user_latent.shape[1]:
            raise ValueError("item and user latent dimensions differ")

    @property
    def d(self) -> int:
        return self.item_latent.shape[1]

    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "noise_sigma": self.noise_sigma,
            "items": [
                {
                    "id": i,
                    "bias": float(self.item_bias[k]),
                    "latent": self.item_latent[k].tolist(),
                    "p_plus": float(self.p_plus[k]),
                    "p_minus": float(self.p_minus[k]),
                }
                for k, i in enumerate(self.item_ids)
            ],
            "users": [
                {"id": u, "label": int(self.user_label[k]), "latent": self.user_latent[k].tolist()}
                for k, u in enumerate(self.user_ids)
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticGroundTruth":
        doc = json.loads(text)
        d = int(doc["d"])
        items, users = doc["items"], doc["users"]
        return cls(
            item_ids=tuple(str(it["id"]) for it in items),
            item_bias=np.array([it["bias"] for it in items], dtype=float),
            item_latent=np.array([it["latent"] for it in items], dtype=float).reshape(-1, d),
            user_ids=tuple(str(u["id"]) for u in users),
            user_label=np.array([u["label"] for u in users], dtype=int),
            user_latent=np.array([u["latent"] for u in users], dtype=float).reshape(-1, d),
            noise_sigma=float(doc["noise_sigma"]),
            p_plus=np.array([it["p_plus"] for it in items], dtype=float),
            p_minus=np.array([it["p_minus"] for it in items], dtype=float),
        )


def generate_synthetic(
    config: SyntheticConfig, seed: int | np.random.Generator
) -> tuple[RatingsDataset, SyntheticGroundTruth]:
    """Sample users, items and ratings from the biased linear model.

    Items get standard normal latent vectors (redrawn if exactly zero) and
    biases uniform in ``[-bias_scale, bias_scale]``; users get a fair-coin
    label and a standard normal latent vector.  Item ``j`` is rated by a
    user with label ``c`` independently with probability ``p_j^c``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, m, d = config.n_users, config.n_items, config.d

    latent = rng.standard_normal((m, d))
    for j in range(m):
        while not np.any(latent[j]):
            latent[j] = rng.standard_normal(d)
    bias = rng.uniform(-config.bias_scale, config.bias_scale, size=m)

    if config.prob_model == "dense":
        p_plus, p_minus = np.ones(m), np.ones(m)
    elif config.prob_model == "uniform":
        p_plus = rng.uniform(config.prob_low, config.prob_high, size=m)
        p_minus = rng.uniform(config.prob_low, config.prob_high, size=m)
    else:
        p_plus, p_minus = np.array(config.p_plus, float), np.array(config.p_minus, float)

    if config.paired:
        half = n // 2
        labels = np.repeat(np.array([[1, -1]]), half, axis=0).ravel()
        user_latent = np.repeat(rng.standard_normal((half, d)), 2, axis=0)
    else:
        labels = np.where(rng.random(n) < 0.5, 1, -1)
        user_latent = rng.standard_normal((n, d))

    probs = np.where(labels[:, None] == 1, p_plus[None, :], p_minus[None, :])
    rated = rng.random((n, m)) < probs
    noise = rng.standard_normal((n, m)) * config.noise_sigma
    values = user_latent @ latent.T + labels[:, None] * bias[None, :] + noise

    user_ids = tuple(str(u) for u in range(n))
    item_ids = tuple(str(j) for j in range(m))
    triples = [
        (user_ids[u], item_ids[j], float(values[u, j]))
        for u in range(n)
        for j in np.flatnonzero(rated[u])
    ]
    users = tuple(
        UserRecord(user_ids[u], int(labels[u]), frozenset(item_ids[j] for j in np.flatnonzero(rated[u])))
        for u in range(n)
    )
    dataset = RatingsDataset(users, item_ids, tuple(triples), "synthetic")
    truth = SyntheticGroundTruth(
        item_ids=item_ids,
        item_bias=bias,
        item_latent=latent,
        user_ids=user_ids,
        user_label=labels.astype(int),
        user_latent=user_latent,
        noise_sigma=float(config.noise_sigma),
        p_plus=p_plus,
        p_minus=p_minus,
    )
    return dataset, truth
