"""Choosing which items to solicit.

The estimator's expected loss is proportional to ``tr[(sum v v^T)^-1]``,
so the analyst maximizes ``F(S) = -tr[(sum_{j in S} v_j v_j^T)^-1]``.
``F`` is monotone and submodular once a spanning seed set is included,
which gives the usual ``1 - 1/e`` guarantee for greedy selection.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg


def _id_key(item_id: str):
    s = str(item_id)
    return (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s)


def _normal_matrix(vectors: Sequence[np.ndarray], d: int) -> np.ndarray:
    if not len(vectors):
        return np.zeros((d, d))
    V = np.vstack(vectors)
    return V.T @ V


def a_optimality_value(item_set: Iterable[str], profiles: Mapping[str, np.ndarray]) -> float:
    """``-tr`` of the inverse normal matrix of ``item_set``; ``-inf`` when singular."""
    vectors = [np.asarray(profiles[i], dtype=float) for i in item_set]
    if not vectors:
        return -math.inf
    d = len(vectors[0])
    if len(vectors) < d or np.linalg.matrix_rank(np.vstack(vectors)) < d:
        return -math.inf
    A = _normal_matrix(vectors, d)
    try:
        inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return -math.inf
    return -float(np.trace(inv))


@dataclass(frozen=True)
class SelectionProblem:
    """Candidates (latent vectors by item id), budget and seed set.

    The seed set must consist of candidates with linearly independent
    latent vectors; it is always part of the evaluated design but never of
    the returned selection.
    """

    candidates: Mapping[str, np.ndarray]
    budget: int
    seed_set: tuple[str, ...]

    def __post_init__(self):
        cands = {str(k): np.asarray(v, dtype=float) for k, v in self.candidates.items()}
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "seed_set", tuple(str(s) for s in self.seed_set))
        if not cands:
            raise ValueError("no candidates")
        dims = {v.shape for v in cands.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("candidate latents must be vectors of one dimension")
        if self.budget < 0 or self.budget > len(cands):
            raise ValueError(f"budget must be in [0, {len(cands)}]")
        missing = [s for s in self.seed_set if s not in cands]
        if missing:
            raise ValueError(f"seed items are not candidates: {missing}")
        if len(set(self.seed_set)) != len(self.seed_set):
            raise ValueError("duplicate seed items")
        if len(self.seed_set) > self.d:
            raise ValueError("seed set larger than the latent dimension")
        if self.seed_set:
            S = np.vstack([cands[s] for s in self.seed_set])
            if np.linalg.matrix_rank(S) < len(self.seed_set):
                raise ValueError("seed set latents are linearly dependent")

    @property
    def d(self) -> int:
        return len(next(iter(self.candidates.values())))

    def pool(self) -> list[str]:
        """Selectable items in tie-breaking order."""
        seed = set(self.seed_set)
        return sorted((i for i in self.candidates if i not in seed), key=_id_key)

    def gain(self, item_set: Iterable[str]) -> float:
        """``F(S + seed) - F(seed)``."""
        base = a_optimality_value(self.seed_set, self.candidates)
        value = a_optimality_value([*self.seed_set, *item_set], self.candidates)
        if math.isinf(base):
            return value
        return value - base


def default_seed_set(candidates: Mapping[str, np.ndarray]) -> tuple[str, ...]:
    """Up to ``d`` candidates with independent latents, by pivoted QR."""
    ids = sorted(candidates, key=_id_key)
    M = np.column_stack([np.asarray(candidates[i], dtype=float) for i in ids])
    _, R, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(M.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    return tuple(ids[k] for k in piv[:rank])


def make_problem(candidates: Mapping[str, np.ndarray], budget: int, seed_set=None) -> SelectionProblem:
    if seed_set is None:
        seed_set = default_seed_set(candidates)
    return SelectionProblem(candidates, budget, tuple(seed_set))


def _marginal(inv: np.ndarray, v: np.ndarray) -> float:
    # trace drop from a rank-one update: v^T A^-2 v / (1 + v^T A^-1 v)
    w = inv @ v
    return float(w @ w / (1.0 + v @ w))


def _rank_one_inverse(inv: np.ndarray, v: np.ndarray) -> np.ndarray:
    w = inv @ v
    return inv - np.outer(w, w) / (1.0 + v @ w)


def greedy_select(problem: SelectionProblem) -> list[str]:
    """Lazy greedy maximization of the A-optimality gain.

    While the design (seed set plus picks) does not yet span the latent
    space, the next pick is the one that raises the rank, then the one with
    the best objective.  Afterwards marginal gains come from rank-one
    inverse updates and are re-evaluated lazily.  Ties go to the smallest
    item id.
    """
    pool = problem.pool()
    d = problem.d
    vec = problem.candidates
    chosen: list[str] = []
    design = [vec[s] for s in problem.seed_set]

    def rank(vs):
        return np.linalg.matrix_rank(np.vstack(vs)) if vs else 0

    remaining = list(pool)
    while len(chosen) < problem.budget and remaining and rank(design) < d:
        best, best_key = None, None
        for idx, item in enumerate(remaining):
            trial = design + [vec[item]]
            key = (rank(trial), a_optimality_value([*problem.seed_set, *chosen, item], vec))
            if best_key is None or key > best_key:
                best, best_key = idx, key
        item = remaining.pop(best)
        chosen.append(item)
        design.append(vec[item])

    if len(chosen) >= problem.budget or not remaining:
        return chosen

    inv = np.linalg.inv(_normal_matrix(design, d))
    order = {item: k for k, item in enumerate(pool)}
    heap = [(-_marginal(inv, vec[i]), order[i], i) for i in remaining]
    heapq.heapify(heap)
    while len(chosen) < problem.budget and heap:
        _, pos, item = heapq.heappop(heap)
        fresh = _marginal(inv, vec[item])
        if not heap or (-fresh, pos) <= heap[0][:2]:
            chosen.append(item)
            inv = _rank_one_inverse(inv, vec[item])
        else:
            heapq.heappush(heap, (-fresh, pos, item))
    return chosen


def brute_force_select(problem: SelectionProblem, cap: int = 10**6) -> list[str]:
    """Exhaustive maximizer of the gain over all sets of size ``min(budget, |pool|)``.

    Among equal values the lexicographically first set in id order wins.
    """
    pool = problem.pool()
    size = min(problem.budget, len(pool))
    if math.comb(len(pool), size) > cap:
        raise ValueError(f"C({len(pool)}, {size}) exceeds the enumeration cap {cap}")
    best, best_val = [], -math.inf
    for combo in itertools.combinations(pool, size):
        val = a_optimality_value([*problem.seed_set, *combo], problem.candidates)
        if not best or val > best_val:
            best, best_val = list(combo), val
    return best
