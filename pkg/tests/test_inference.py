from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from midpoint.factorization import ExtendedItemProfile
from midpoint.inference import (
    LogisticModel,
    NaiveBayesModel,
    auc,
    dense_inputs,
    logistic_score,
    logistic_train,
    lse_attack,
    nb_score,
    nb_train,
)
from midpoint.protocol import mp_disclose, mp_obfuscate

from conftest import make_profiles


def prof(item, bias, *latent):
    return ExtendedItemProfile(item, bias, np.array(latent, dtype=float))


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == -1]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


def test_lse_exactly_determined_toy_is_a_tie():
    # two items in d=2 fit either hypothesis exactly; the tie goes to +1
    slice_ = [prof("1", 0.5, 1, 0), prof("2", -0.5, 0, 1)]
    res = lse_attack([1.5, 0.5], slice_, ridge=0.0)
    assert res.label == 1
    assert res.score == pytest.approx(0.0, abs=1e-12)


def test_lse_overdetermined_toy():
    # third item (0.5, (1, 1)) with rating 2.5; hand-solving the -1 hypothesis
    # gives x = (7/3, 1/3) and RSS = 1/3, while the +1 hypothesis fits exactly
    slice_ = [prof("1", 0.5, 1, 0), prof("2", -0.5, 0, 1), prof("3", 0.5, 1, 1)]
    res = lse_attack([1.5, 0.5, 2.5], slice_, ridge=0.0)
    assert res.label == 1
    assert res.score == pytest.approx(1 / 3, abs=1e-12)
    assert np.allclose(res.x_hat, [1, 1])
    flipped = lse_attack([1.5, 0.5, 2.5], [prof(p.item_id, -p.bias, *p.latent) for p in slice_], ridge=0.0)
    assert flipped.label == -1 and flipped.score == pytest.approx(-1 / 3, abs=1e-12)


def test_lse_zero_biases_tie():
    rng = np.random.default_rng(0)
    slice_ = [prof(str(j), 0.0, *rng.standard_normal(2)) for j in range(5)]
    res = lse_attack(rng.standard_normal(5), slice_)
    assert res.label == 1 and res.score == 0.0
    with pytest.raises(ValueError):
        lse_attack([], [])


def test_lse_on_mp_output_is_label_independent():
    rng = np.random.default_rng(1)
    slice_ = make_profiles(rng, 10, 3)
    disc = mp_disclose(slice_)
    V = np.array([p.latent for p in slice_])
    b = disc.bias
    scores = {1: [], -1: []}
    for x0 in (1, -1):
        for _ in range(5000):
            x = rng.standard_normal(3)
            r = V @ x + x0 * b + 0.5 * rng.standard_normal(10)
            scores[x0].append(lse_attack(mp_obfuscate(r, x0, disc).values, slice_).score)
    assert stats.ks_2samp(scores[1], scores[-1]).pvalue > 0.01


def test_dense_inputs():
    X = dense_inputs([{"a": 4.0}, {"b": 2.0, "zz": 1.0}], ["a", "b"])
    assert np.array_equal(X, [[4, 0], [0, 2]])


def test_logistic_separable():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    model = logistic_train(X, [1, -1], l2=1e-3, epochs=500)
    s = logistic_score(model, X)
    assert s[0] > 0 > s[1]


def test_logistic_no_signal():
    X = np.ones((6, 3))
    model = logistic_train(X, [1, -1, 1, -1, 1, -1])
    s = logistic_score(model, X)
    assert np.allclose(s, s[0])
    assert auc(s, [1, -1, 1, -1, 1, -1]) == 0.5


def test_logistic_reaches_generic_optimum():
    # the fit should reach the same optimum as a generic solver on the same objective
    from scipy.optimize import minimize

    rng = np.random.default_rng(2)
    X = rng.standard_normal((80, 4))
    y = np.where(X @ [1.0, -2.0, 0.5, 0.0] + 0.3 * rng.standard_normal(80) > 0, 1, -1)
    l2 = 1.0
    model = logistic_train(X, y, l2=l2, epochs=3000)

    def objective(theta):
        z = y * (X @ theta[:4] + theta[4])
        return np.mean(np.logaddexp(0, -z)) + 0.5 * l2 / len(y) * theta[:4] @ theta[:4]

    ref = minimize(objective, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
    assert np.allclose(model.weights, ref[:4], atol=1e-4)
    assert model.intercept == pytest.approx(ref[4], abs=1e-4)


def test_logistic_deterministic_and_json():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((20, 3))
    y = [1, -1] * 10
    a = logistic_train(X, y, seed=4)
    assert a.to_json() == logistic_train(X, y, seed=4).to_json()
    back = LogisticModel.from_json(a.to_json())
    assert np.array_equal(logistic_score(back, X), logistic_score(a, X))
    with pytest.raises(ValueError):
        logistic_train(X, [1] * 20)


def test_nb_hand_computed():
    X = np.array([[1, 2], [1, 0], [2, 2], [0, 2]])
    model = nb_train(X, [1, 1, -1, -1], alpha=1.0, levels=(0, 1, 2))
    s = nb_score(model, np.array([[1, 2], [2, 1], [0, 0]]))
    assert np.allclose(s, [np.log(2), -np.log(2), 0.0], atol=1e-9)


def test_nb_large_alpha_gives_prior():
    X = np.array([[1, 2], [1, 0], [2, 2]])
    model = nb_train(X, [1, 1, -1], alpha=1e9, levels=(0, 1, 2))
    assert np.allclose(nb_score(model, X), np.log(2), atol=1e-6)


def test_nb_symmetric():
    X = np.array([[1, 2], [2, 1]])
    model = nb_train(X, [1, -1], levels=(0, 1, 2))
    assert nb_score(model, np.array([[1, 1]]))[0] == pytest.approx(0.0, abs=1e-12)


def test_nb_rejects_reals():
    with pytest.raises(ValueError, match="round"):
        nb_train(np.array([[1.5, 2.0], [1.0, 3.0]]), [1, -1])
    with pytest.raises(ValueError):
        nb_train(np.array([[1, 2], [1, 3]]), [1, -1], alpha=0.0)
    model = nb_train(np.array([[1, 2], [1, 3]]), [1, -1])
    assert NaiveBayesModel.from_json(model.to_json()).levels == model.levels


def test_auc_examples():
    assert auc([3, 2, 1, 0], [1, 1, -1, -1]) == 1.0
    assert auc([1, 1, 1], [1, -1, 1]) == 0.5
    assert auc([0.9, 0.8, 0.3], [1, -1, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([1, 2], [1, 1])


labels_st = st.lists(st.sampled_from([1, -1]), min_size=2, max_size=200).filter(lambda l: len(set(l)) == 2)


@given(labels_st, st.data())
@settings(max_examples=100, deadline=None)
def test_auc_matches_pair_counting(labels, data):
    scores = data.draw(st.lists(st.integers(-5, 5), min_size=len(labels), max_size=len(labels)))
    assert auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@given(labels_st, st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_auc_monotone_invariance_and_flip(labels, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(len(labels))
    assert auc(np.exp(3 * s) + 7, labels) == pytest.approx(auc(s, labels), abs=1e-12)
    assert auc(s, labels) + auc(-s, labels) == pytest.approx(1.0, abs=1e-12)
