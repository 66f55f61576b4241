import json

import numpy as np
import pytest

from midpoint.dataset import RatingsDataset, SyntheticConfig, generate_synthetic, split_user_ratings
from midpoint.factorization import (
    AnalystModel,
    ExtendedItemProfile,
    MfHyperparams,
    SingleClassItemWarning,
    TrainingDiverged,
    compute_biases,
    predict_rating,
    train_mf,
)


def _ds(rows, labels):
    return RatingsDataset.from_triples(rows, labels)


def test_bias_formula():
    ds = _ds([("a", "i", 4.0), ("b", "i", 3.0), ("a", "j", 2.0), ("b", "j", 2.0)], {"a": 1, "b": -1})
    assert compute_biases(ds) == {"i": 0.5, "j": 0.0}


def test_bias_toy_three_users():
    ds = _ds([("a", "i", 5.0), ("b", "i", 3.0), ("c", "i", 2.0)], {"a": 1, "b": 1, "c": -1})
    assert compute_biases(ds)["i"] == pytest.approx(1.0, abs=1e-12)


def test_single_class_item_gets_zero_bias():
    ds = _ds([("a", "i", 5.0), ("b", "j", 3.0), ("a", "j", 1.0)], {"a": 1, "b": -1})
    with pytest.warns(SingleClassItemWarning):
        biases = compute_biases(ds)
    assert biases["i"] == 0.0
    assert biases["j"] == pytest.approx(-1.0)


def test_predict_rating():
    prof = ExtendedItemProfile("i", 0.5, np.array([2.0, 5.0]))
    assert predict_rating([0.0, 0.0], 0.0, prof) == 0.0
    assert predict_rating([1.0, 0.0], 1.0, prof) == pytest.approx(2.5)
    assert predict_rating([1.0, 1.0], 0.0, prof) == pytest.approx(7.0)
    with pytest.raises(ValueError):
        predict_rating([1.0], 0.0, prof)


def test_zero_latent_rejected():
    with pytest.raises(ValueError):
        ExtendedItemProfile("i", 0.0, np.zeros(3))


def _synthetic(n_users=300, n_items=30, d=2, sigma=0.0, seed=0, **kw):
    return generate_synthetic(SyntheticConfig(n_users=n_users, n_items=n_items, d=d, noise_sigma=sigma, **kw), seed)


def test_rank_one_noiseless_fit():
    ds, _ = _synthetic(n_users=200, n_items=20, d=1, bias_scale=0.5)
    hp = MfHyperparams(d=1, learning_rate=0.02, regularization=0.0, epochs=200, seed=1)
    model = train_mf(ds, compute_biases(ds), hp)
    assert model.loss_history[-1] < 1e-3


def test_large_regularization_shrinks():
    ds, _ = _synthetic(n_users=100, n_items=15, d=2, sigma=0.3, seed=2)
    biases = compute_biases(ds)
    norms = []
    for reg in (0.01, 100.0):
        hp = MfHyperparams(d=2, learning_rate=0.005, regularization=reg, epochs=30, seed=0)
        model = train_mf(ds, biases, hp)
        norms.append(np.mean([np.linalg.norm(p.latent) for p in model.catalog]))
    assert norms[1] < norms[0]
    assert norms[1] < 1e-2


def test_deterministic_and_frozen_coordinates():
    ds, _ = _synthetic(n_users=80, n_items=12, d=2, sigma=0.5, seed=3, prob_model="uniform")
    biases = compute_biases(ds)
    hp = MfHyperparams(d=2, epochs=5, seed=4)
    a = train_mf(ds, biases, hp)
    b = train_mf(ds, biases, hp)
    assert a.to_json() == b.to_json()
    for p in a.catalog:
        assert p.bias == biases[p.item_id]


def test_loss_monotone_small_step():
    ds, _ = _synthetic(n_users=60, n_items=10, d=2, sigma=0.5, seed=5)
    hp = MfHyperparams(d=2, learning_rate=0.002, regularization=0.1, epochs=15, seed=0)
    hist = np.array(train_mf(ds, compute_biases(ds), hp).loss_history)
    assert np.all(np.diff(hist) <= 1e-6)


def test_divergence_detected():
    ds, _ = _synthetic(n_users=40, n_items=10, d=2, sigma=0.5, seed=6)
    hp = MfHyperparams(d=2, learning_rate=50.0, regularization=0.0, epochs=50, seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train_mf(ds, compute_biases(ds), hp)
    assert info.value.epoch >= 1


def test_rating_probabilities_are_exact_fractions():
    rows = [("a", "i", 1.0), ("b", "i", 2.0), ("c", "j", 3.0), ("a", "j", 4.0), ("d", "j", 1.0)]
    ds = _ds(rows, {"a": 1, "b": 1, "c": -1, "d": -1})
    model = train_mf(ds, {"i": 0.0, "j": 0.0}, MfHyperparams(d=1, epochs=2))
    assert model.probs("i") == (1.0, 0.0)
    assert model.probs("j") == (0.5, 1.0)


def test_noiseless_holdout_rmse():
    ds, truth = _synthetic(n_users=600, n_items=30, d=2, bias_scale=0.5, seed=8)
    train_users = ds.labeled_users()[:500]
    model = train_mf(ds.subset(train_users), compute_biases(ds.subset(train_users)),
                     MfHyperparams(d=2, learning_rate=0.02, regularization=0.0, epochs=150, seed=0))
    profiles = model.profiles
    from midpoint.protocol import estimate_profile, ObfuscatedFeedback

    errs = []
    for u in ds.labeled_users()[500:]:
        obs, hold = split_user_ratings(ds.user_ratings(u), 0.7, 0)
        x0 = ds.label(u)
        items = list(obs)
        y = np.array([obs[i] - x0 * profiles[i].bias for i in items])
        x_hat = estimate_profile(ObfuscatedFeedback(tuple(items), y), profiles).x_hat
        errs += [predict_rating(x_hat, x0, profiles[i]) - r for i, r in hold.items()]
    assert np.sqrt(np.mean(np.square(errs))) < 0.05


def test_model_json_schema_and_validation():
    ds, _ = _synthetic(n_users=30, n_items=5, d=2, sigma=0.5, seed=9)
    model = train_mf(ds, compute_biases(ds), MfHyperparams(d=2, epochs=2))
    doc = json.loads(model.to_json())
    assert set(doc) >= {"d", "label_name", "items", "noise_sigma_hat"}
    assert set(doc["items"][0]) == {"id", "bias", "latent", "p_plus", "p_minus"}
    back = AnalystModel.from_json(model.to_json())
    assert back.item_ids == model.item_ids
    assert back.catalog == model.catalog
    doc["items"][0]["latent"] = [0.0, 0.0]
    with pytest.raises(ValueError):
        AnalystModel.from_json(json.dumps(doc))
