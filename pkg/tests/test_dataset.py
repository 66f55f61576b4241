
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midpoint.dataset import (
    MalformedRowsWarning,
    ParseError,
    RatingsDataset,
    SyntheticConfig,
    SyntheticGroundTruth,
    filter_min_counts,
    generate_synthetic,
    parse_labels,
    parse_movielens_users,
    parse_ratings,
    split_folds,
    split_user_ratings,
)


def test_parse_double_colon():
    ds = parse_ratings(b"1::10::4\n1::11::5")
    assert len(ds.users) == 1
    assert len(ds.items) == 2
    assert len(ds.ratings) == 2
    assert ds.user_ratings("1") == {"10": 4.0, "11": 5.0}


def test_parse_empty():
    ds = parse_ratings(b"")
    assert len(ds.users) == 0 and len(ds.ratings) == 0


def test_duplicate_pair_names_line():
    with pytest.raises(ParseError) as info:
        parse_ratings(b"1::10::4\n1::10::4\n")
    assert info.value.lines == [2] or list(info.value.lines) == [2]
    assert "2" in str(info.value)


def test_crlf_and_timestamps():
    ds = parse_ratings(b"1::10::4::978300760\r\n2::10::3::978300761\r\n")
    assert ds.user_ratings("2") == {"10": 3.0}


def test_out_of_range_rejected():
    with pytest.raises(ParseError):
        parse_ratings(b"1::10::6\n")
    ds = parse_ratings(b"1::10::6\n", rating_range=None)
    assert ds.user_ratings("1")["10"] == 6.0


def test_malformed_rows_reported():
    with pytest.warns(MalformedRowsWarning, match="3"):
        ds = parse_ratings(b"1::10::4\n2::11::5\nnot a row\n")
    assert len(ds.ratings) == 2
    with pytest.raises(ParseError):
        parse_ratings(b"1::10::4\nbad\n", strict=True)


def test_csv_with_labels():
    text = b"user_id,item_id,rating\nu1,a,4\nu2,a,2\nu3,b,5\n"
    labels = parse_labels(b"user_id,label\nu1,1\nu2,-1\n")
    ds = parse_ratings(text, "csv", labels=labels, label_name="gender")
    assert ds.label("u1") == 1 and ds.label("u2") == -1 and ds.label("u3") is None
    assert ds.labeled_users() == ["u1", "u2"]


def test_label_map_and_movielens_users():
    labels = parse_labels(b"user_id,label\na,M\nb,F\n", {"M": 1, "F": -1})
    assert labels == {"a": 1, "b": -1}
    users = parse_movielens_users(b"1::F::1::10::48067\n2::M::56::16::70072\n")
    assert users == {"1": -1, "2": 1}
    ages = parse_movielens_users(b"1::F::25::10::1\n2::M::45::16::2\n3::M::56::1::3\n", "age")
    assert ages["1"] == 1 and ages["2"] == -1 and ages["3"] is None


def test_unmapped_label_is_unknown():
    assert parse_labels(b"user_id,label\na,2\nb,-1\n") == {"a": None, "b": -1}
    with pytest.raises(ParseError):
        parse_labels(b"uid,lab\na,1\n")


def test_invariants_enforced():
    with pytest.raises(ValueError):
        RatingsDataset.from_triples([("u", "i", 1.0), ("u", "i", 2.0)])


triples = st.lists(
    st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(2, 10).map(lambda k: k / 2)),
    max_size=60,
    unique_by=lambda t: (t[0], t[1]),
)


@given(triples)
@settings(max_examples=60, deadline=None)
def test_round_trip(rows):
    ds = RatingsDataset.from_triples([(str(u), str(i), r) for u, i, r in rows])
    assert parse_ratings(ds.to_double_colon()) == ds
    assert parse_ratings(ds.to_csv(), "csv") == ds


def _labeled(n):
    return RatingsDataset.from_triples(
        [(str(u), "i", 3.0) for u in range(n)], {str(u): 1 if u % 2 else -1 for u in range(n)}
    )


def test_split_folds_examples():
    ds = _labeled(10)
    assert sorted(map(len, split_folds(ds, 10, 0))) == [1] * 10
    assert sorted(map(len, split_folds(ds, 3, 0))) == [3, 3, 4]
    assert split_folds(ds, 3, 5) == split_folds(ds, 3, 5)
    with pytest.raises(ValueError):
        split_folds(ds, 11, 0)
    with pytest.raises(ValueError):
        split_folds(ds, 0, 0)


def test_unlabeled_users_not_in_folds():
    ds = RatingsDataset.from_triples([("a", "i", 1.0), ("b", "i", 2.0), ("c", "i", 2.0)], {"a": 1, "b": -1})
    folds = split_folds(ds, 2, 0)
    assert sorted(u for f in folds for u in f) == ["a", "b"]


@given(st.integers(1, 60), st.integers(1, 12), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_folds_partition(n, k, seed):
    if k > n:
        return
    folds = split_folds(_labeled(n), k, seed)
    flat = [u for f in folds for u in f]
    assert len(folds) == k
    assert len(flat) == len(set(flat)) == n
    assert max(map(len, folds)) - min(map(len, folds)) <= 1


def test_split_user_ratings_examples():
    ratings = {str(j): float(j % 5 + 1) for j in range(10)}
    obs, hold = split_user_ratings(ratings, 0.7, 3)
    assert len(obs) == 7 and len(hold) == 3
    assert {**obs, **hold} == ratings
    assert split_user_ratings(ratings, 0.7, 3) == (obs, hold)
    obs, hold = split_user_ratings({"a": 1.0, "b": 2.0}, 0.7, 0)
    assert len(obs) == 1 and len(hold) == 1
    with pytest.raises(ValueError):
        split_user_ratings({"a": 1.0}, 0.7, 0)


@given(st.integers(2, 50), st.floats(0.01, 0.99), st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_split_is_partition(n, fraction, seed):
    ratings = {str(j): 1.0 for j in range(n)}
    obs, hold = split_user_ratings(ratings, fraction, seed)
    assert not set(obs) & set(hold)
    assert set(obs) | set(hold) == set(ratings)
    assert len(obs) == min(max(int(np.floor(fraction * n + 0.5)), 1), n - 1)


def test_filter_min_counts():
    ds = RatingsDataset.from_triples([("a", "x", 1.0), ("a", "y", 2.0), ("b", "x", 3.0)])
    out = filter_min_counts(ds, min_user_ratings=2)
    assert [u.user_id for u in out.users] == ["a"]


def _truth_residual(ds, truth):
    uidx = {u: k for k, u in enumerate(truth.user_ids)}
    iidx = {i: k for k, i in enumerate(truth.item_ids)}
    res = []
    for u, i, r in ds.ratings:
        a, b = uidx[u], iidx[i]
        pred = truth.user_latent[a] @ truth.item_latent[b] + truth.user_label[a] * truth.item_bias[b]
        res.append(r - pred)
    return np.array(res)


def test_synthetic_noiseless_exact():
    cfg = SyntheticConfig(n_users=50, n_items=20, d=4, noise_sigma=0.0)
    ds, truth = generate_synthetic(cfg, 3)
    assert len(ds.ratings) == 50 * 20
    assert np.max(np.abs(_truth_residual(ds, truth))) < 1e-12
    assert np.all(np.linalg.norm(truth.item_latent, axis=1) > 0)


def test_synthetic_deterministic_and_json():
    cfg = SyntheticConfig(n_users=30, n_items=10, d=2, prob_model="uniform")
    a, ta = generate_synthetic(cfg, 9)
    b, tb = generate_synthetic(cfg, 9)
    assert a == b
    assert ta.to_json() == tb.to_json()
    back = SyntheticGroundTruth.from_json(ta.to_json())
    assert np.array_equal(back.user_latent, ta.user_latent)
    assert back.d == 2


def test_synthetic_bias_zero_symmetric():
    cfg = SyntheticConfig(n_users=4000, n_items=3, d=2, bias_scale=0.0, paired=True)
    ds, truth = generate_synthetic(cfg, 4)
    assert np.all(truth.item_bias == 0)
    plus = [ds.user_ratings(u) for u in ds.labeled_users() if ds.label(u) == 1]
    minus = [ds.user_ratings(u) for u in ds.labeled_users() if ds.label(u) == -1]
    # paired users share x and there is no bias, so only noise differs
    for item in truth.item_ids:
        a = np.array([r[item] for r in plus])
        b = np.array([r[item] for r in minus])
        assert abs(a.mean() - b.mean()) < 0.1
        assert abs(a.std() - b.std()) < 0.1


def test_synthetic_rating_frequencies():
    cfg = SyntheticConfig(n_users=1000, n_items=50, d=5, prob_model="uniform")
    ds, truth = generate_synthetic(cfg, 11)
    labels = np.array([ds.label(u) for u in truth.user_ids])
    counts = {c: np.zeros(50) for c in (1, -1)}
    iidx = {i: k for k, i in enumerate(truth.item_ids)}
    for u, i, _ in ds.ratings:
        counts[ds.label(u)][iidx[i]] += 1
    for c, p in ((1, truth.p_plus), (-1, truth.p_minus)):
        freq = counts[c] / np.sum(labels == c)
        assert np.max(np.abs(freq - p)) < 0.03 + 0.07  # n per class is ~500, so widen by 3 sd


@pytest.mark.slow
def test_synthetic_indicator_is_bernoulli():
    n = 100_000
    cfg = SyntheticConfig(n_users=2 * n, n_items=3, d=1, prob_model="fixed", p_plus=(0.2, 0.5, 0.9), p_minus=(0.7, 0.5, 0.05), paired=True)
    ds, truth = generate_synthetic(cfg, 21)
    counts = {1: np.zeros(3), -1: np.zeros(3)}
    iidx = {i: k for k, i in enumerate(truth.item_ids)}
    for u, i, _ in ds.ratings:
        counts[ds.label(u)][iidx[i]] += 1
    for c, p in ((1, truth.p_plus), (-1, truth.p_minus)):
        freq = counts[c] / n
        assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


def test_invalid_config():
    with pytest.raises(ValueError):
        SyntheticConfig(n_users=0, n_items=1, d=1)
    with pytest.raises(ValueError):
        SyntheticConfig(n_users=1, n_items=1, d=1, noise_sigma=-1)
