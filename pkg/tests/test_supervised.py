import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histovl.eval_stats import balanced_accuracy
from histovl.exceptions import InvalidArgumentError, ShapeError
from histovl.numerics import SeededRng
from histovl.supervised import (
    ABMILClassifier, FewShotPlan, LinearProbe, LinearProbeConfig, TrainingSchedule, abmil_forward, abmil_loss,
    build_fewshot_splits, init_abmil, inverse_frequency_weights, linear_probe_fit, probe_lambda, train_abmil,
)
from histovl.synthetic import bag_prototypes, gaussian_bags

import oracles


def _params(rng, d=6, c=3):
    p = init_abmil(d, c, rng, hidden=12, attn_dim=8)
    for k in p:
        if k.startswith("b"):
            p[k] = 0.1 * rng.normal(size=p[k].shape)
    return p


# --- forward -------------------------------------------------------------------------

def test_default_architecture(rng):
    p = init_abmil(32, 4, rng)
    assert p["w1"].shape == (32, 512) and p["wa"].shape == (512, 384) and p["wb"].shape == (512, 384)
    assert p["wc"].shape == (384, 1) and p["wh"].shape == (512, 4)


def test_single_instance_attention_is_one(rng):
    _, a, _ = abmil_forward(rng.normal(size=(1, 6)), _params(rng))
    assert a.tolist() == [1.0]


def test_duplicates_match_single(rng):
    p = _params(rng)
    x = rng.normal(size=(1, 6))
    single = abmil_forward(x, p)[0]
    for k in (2, 5, 17):
        np.testing.assert_allclose(abmil_forward(np.repeat(x, k, axis=0), p)[0], single, atol=1e-12)


def test_random_bag_gradients(rng):
    for _ in range(5):
        p = _params(rng)
        bag = rng.normal(size=(5, 6))
        label = int(rng.integers(0, 3))
        _, g = abmil_loss(bag, label, p)
        f = lambda q: abmil_loss(bag, label, q, need_grad=False)[0]
        assert max(oracles._check_key(f, g, p, rng, k) for k in sorted(p)) < 1e-4


@given(st.integers(0, 10_000))
def test_attention_sums_to_one_and_order_free(seed):
    r = SeededRng(seed)
    p = _params(r)
    n = int(r.integers(1, 20))
    bag = r.normal(size=(n, 6)) * 3
    probs, a, _ = abmil_forward(bag, p)
    assert abs(a.sum() - 1.0) < 1e-12
    perm = r.permutation(n)
    np.testing.assert_allclose(abmil_forward(bag[perm], p)[0], probs, atol=1e-10)
    assert abmil_forward(bag, p)[0].tobytes() == probs.tobytes()


def test_forward_errors(rng):
    p = _params(rng)
    with pytest.raises(ShapeError):
        abmil_forward(np.zeros((0, 6)), p)
    with pytest.raises(ShapeError):
        abmil_forward(np.zeros((2, 5)), p)
    with pytest.raises(InvalidArgumentError):
        abmil_forward(np.zeros((2, 6)), p, train=True)


def test_dropout_only_in_train(rng):
    p = _params(rng)
    bag = rng.normal(size=(4, 6))
    a = abmil_forward(bag, p, train=True, rng=SeededRng(1))[0]
    b = abmil_forward(bag, p, train=True, rng=SeededRng(2))[0]
    assert not np.allclose(a, b)
    assert abmil_forward(bag, p, train=True, rng=SeededRng(1), dropout=0.0)[0].tobytes() == \
        abmil_forward(bag, p)[0].tobytes()


# --- training ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def separable():
    protos = bag_prototypes(2, SeededRng(0), dim=16, signal=3.0)
    return gaussian_bags(20, protos, SeededRng(1))


def test_training_separable(separable):
    bags, y = separable
    params, report = train_abmil(bags, y, TrainingSchedule(), SeededRng(2))
    pred = [int(np.argmax(abmil_forward(b, params)[0])) for b in bags]
    assert balanced_accuracy(y, pred) >= 0.95
    assert len(report["loss_curve"]) == 20 and not report["degenerate"]


def test_training_deterministic(separable):
    bags, y = separable
    s = TrainingSchedule(epochs=2)
    _, r1 = train_abmil(bags[:8], y[:8], s, SeededRng(5), hidden=16, attn_dim=8)
    _, r2 = train_abmil(bags[:8], y[:8], s, SeededRng(5), hidden=16, attn_dim=8)
    assert r1["loss_curve"] == r2["loss_curve"]


def test_single_class_flagged(separable):
    bags, y = separable
    only = [b for b, t in zip(bags, y) if t == 0][:5]
    np.testing.assert_allclose(inverse_frequency_weights([0] * 5), 0.2)
    _, report = train_abmil(only, [0] * 5, TrainingSchedule(epochs=1), SeededRng(0), hidden=8, attn_dim=4)
    assert report["degenerate"]


def test_sampler_class_frequencies_uniform():
    y = np.array([0] * 10 + [1] * 30 + [2] * 60)
    draws = SeededRng(3).choice(len(y), 100_000, p=inverse_frequency_weights(y))
    freq = np.bincount(y[draws], minlength=3) / 100_000
    sd = np.sqrt((1 / 3) * (2 / 3) / 100_000)
    assert np.all(np.abs(freq - 1 / 3) < 3 * sd)


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        TrainingSchedule(epochs=0)
    with pytest.raises(InvalidArgumentError):
        TrainingSchedule(dropout=1.0)


def test_abmil_estimator(separable):
    bags, y = separable
    clf = ABMILClassifier(hidden=16, attn_dim=8, epochs=5, seed=0).fit(bags, y)
    proba = clf.predict_proba(bags[:3])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert abs(clf.attention(bags[0]).sum() - 1) < 1e-12


# --- linear probe ---------------------------------------------------------------------------

def test_lambda_formula():
    assert probe_lambda(512, 9) == 100 / 4608
    assert LinearProbeConfig.for_problem(512, 9).lam == 100 / (512 * 9)
    with pytest.raises(InvalidArgumentError):
        LinearProbeConfig(0.0)


def test_separable_1d():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    W, b, info = linear_probe_fit(X, y)
    assert np.all(np.isfinite(W)) and info["lambda"] == 50.0
    assert np.all(np.argmax(X @ W + b, axis=1) == y)
    Wg, bg = oracles.gd_oracle(X, y, 50.0, 2)
    assert info["objective"] <= oracles.probe_objective_ref(Wg, bg, X, y, 50.0) + 1e-3
    assert abs(info["objective"] - oracles.probe_objective_ref(W, b, X, y, 50.0)) < 1e-10


def test_zero_features_uniform():
    X = np.zeros((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    W, b, _ = linear_probe_fit(X, y)
    assert np.allclose(W, 0) and np.allclose(b - b.mean(), 0, atol=1e-6)


def test_probe_matches_gd_oracle():
    r = SeededRng(21)
    for _ in range(3):
        n, m, c = 40, 5, 3
        X = r.normal(size=(n, m))
        y = np.arange(n) % c
        lam = probe_lambda(m, c)
        W, b, info = linear_probe_fit(X, y)
        Wg, bg = oracles.gd_oracle(X, y, lam, c)
        assert info["objective"] <= oracles.probe_objective_ref(Wg, bg, X, y, lam) + 1e-3
        assert info["grad_norm"] < 1e-6


def test_probe_errors_and_estimator(rng):
    with pytest.raises(InvalidArgumentError):
        linear_probe_fit(np.ones((3, 2)), [0, 0, 0])
    with pytest.raises(InvalidArgumentError):
        linear_probe_fit(np.array([[np.nan, 1.0], [0.0, 1.0]]), [0, 1])
    X = rng.normal(size=(30, 4))
    y = (X[:, 0] > 0).astype(int)
    assert LinearProbe().fit(X, y).info_["lambda"] == 100 / 8
    clf = LinearProbe(lam=1e-3).fit(X, y)
    assert clf.score(X, y) > 0.9
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)


# --- few-shot -------------------------------------------------------------------------------

def test_full_class_all_replicates_identical():
    y = np.array([0] * 4 + [1] * 4)
    splits = build_fewshot_splits(y, FewShotPlan((4,), 5), SeededRng(0))
    assert all(s.indices.tolist() == list(range(8)) for s in splits)


def test_one_shot_two_classes():
    y = np.array([0, 1] * 10)
    splits = build_fewshot_splits(y, FewShotPlan((1,), 5), SeededRng(0))
    assert len(splits) == 5
    assert all(len(s.indices) == 2 and set(y[s.indices]) == {0, 1} for s in splits)


def test_replicate_draws_match_enumeration():
    # one class with a 6-item pool: every 2-subset is equally likely
    y = np.zeros(6, int)
    subsets = {tuple(c) for c in itertools.combinations(range(6), 2)}
    splits = build_fewshot_splits(y, FewShotPlan((2,), 3000), SeededRng(1))
    draws = [tuple(s.indices.tolist()) for s in splits]
    assert set(draws) == subsets
    counts = np.array([draws.count(s) for s in sorted(subsets)])
    p = 1 / 15
    assert np.all(np.abs(counts - 3000 * p) < 4 * np.sqrt(3000 * p * (1 - p)))
    assert len(set(draws[:5])) > 1


def test_replicate_streams_are_independent():
    y = np.array([0] * 10 + [1] * 10)
    a = build_fewshot_splits(y, FewShotPlan((2, 4), 3), SeededRng(9))
    b = build_fewshot_splits(y, FewShotPlan((4,), 3), SeededRng(9))
    assert [s.indices.tolist() for s in a if s.shots == 4] == [s.indices.tolist() for s in b]


def test_clamping_and_missing_class():
    y = np.array([0] * 2 + [1] * 8)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        splits = build_fewshot_splits(y, FewShotPlan((4,), 1), SeededRng(0))
    assert splits[0].clamped == [0] and len(splits[0].indices) == 6 and w
    with pytest.raises(InvalidArgumentError):
        build_fewshot_splits(y, FewShotPlan((1,), 1), SeededRng(0), classes=[0, 1, 2])
