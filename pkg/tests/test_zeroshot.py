import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histovl.data_io import EmbeddingStore, SlideManifest
from histovl.exceptions import EmptySlideError, InvalidArgumentError, ShapeError
from histovl.numerics import SeededRng
from histovl.prompting import ClassEmbeddingBank
from histovl.zeroshot import (
    BACKGROUND_RGB, COLORMAP, MID_INDEX, ScoreMatrix, TopKConfig, TopKPoolingClassifier, ZeroShotClassifier,
    classify_slide, classify_tile, heatmap, retrieval_ranks, retrieve, select_k, tile_scores, topk_pool,
)

import oracles


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _bank(v):
    return ClassEmbeddingBank([f"c{i}" for i in range(len(v))], v)


# --- tiles --------------------------------------------------------------------------

def test_exact_match_class_two():
    bank = _bank(np.eye(4))
    cls, s = classify_tile(np.eye(4)[2], bank)
    assert cls == 2 and s[2] == 1.0


def test_identical_classes_lowest_index():
    v = np.array([[1.0, 0], [0, 1.0], [0, 1.0]])
    assert classify_tile(np.array([0, 1.0]), _bank(v))[0] == 1


def test_classify_tile_brute_force(rng):
    for _ in range(50):
        v = _unit(rng, 5, 6)
        u = rng.normal(size=6)
        scores = [float(sum(a * b for a, b in zip(row, u))) for row in v]
        assert classify_tile(u, _bank(v))[0] == max(range(5), key=lambda j: (scores[j], -j))


def test_classify_tile_shape():
    with pytest.raises(ShapeError):
        classify_tile(np.zeros(3), _bank(np.eye(4)))
    with pytest.raises(ShapeError):
        tile_scores(np.zeros((2, 3)), _bank(np.eye(4)))


# --- top-K pooling ---------------------------------------------------------------------

def test_topk_extremes(rng):
    s = rng.normal(size=(9, 3))
    np.testing.assert_array_equal(topk_pool(s, 1), s.max(axis=0))
    np.testing.assert_allclose(topk_pool(s, 9), s.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(topk_pool(s, 500), s.mean(axis=0), atol=1e-15)


def test_topk_7x3_k2(rng):
    s = rng.normal(size=(7, 3))
    np.testing.assert_allclose(topk_pool(s, 2), oracles.topk_brute(s, 2), atol=1e-12)


def test_topk_oracle_1000_matrices():
    r = SeededRng(77)
    for _ in range(1000):
        n, c = int(r.integers(1, 40)), int(r.integers(1, 6))
        s = r.normal(size=(n, c))
        k = int(r.integers(1, 60))
        assert np.max(np.abs(topk_pool(s, k) - oracles.topk_brute(s, k))) <= 1e-12


def test_topk_errors():
    with pytest.raises(EmptySlideError):
        topk_pool(np.zeros((0, 3)), 1)
    with pytest.raises(InvalidArgumentError):
        topk_pool(np.zeros((2, 3)), 0)


@given(st.integers(0, 10_000))
def test_topk_permutation_and_monotone(seed):
    r = SeededRng(seed)
    n = int(r.integers(1, 30))
    s = r.normal(size=(n, 4))
    perm = r.permutation(n)
    for k in (1, 3, 10):
        np.testing.assert_array_equal(topk_pool(s[perm], k), topk_pool(s, k))
    pooled = np.array([topk_pool(s, k) for k in range(1, n + 1)])
    assert np.all(np.diff(pooled, axis=0) <= 1e-12)
    assert np.all(pooled <= s.max(axis=0) + 1e-12) and np.all(pooled >= s.mean(axis=0) - 1e-12)


def test_topk_config_validation():
    assert TopKConfig().ks == (1, 5, 10, 50, 100)
    for bad in ((5, 1), (0, 1), (), (1, 1)):
        with pytest.raises(InvalidArgumentError):
            TopKConfig(bad)


# --- slides ----------------------------------------------------------------------------

def test_one_tile_slide_same_for_every_k(rng):
    bank = _bank(_unit(rng, 3, 4))
    pred = classify_slide(None, _unit(rng, 1, 4), bank)
    assert len(set(pred.predictions.tolist())) == 1


def test_constant_scores_lowest_index():
    pred = classify_slide(None, ScoreMatrix(np.full((20, 4), 0.3)), _bank(np.eye(4)))
    assert pred.predictions.tolist() == [0] * 5


def test_minority_hot_tiles():
    # 10 of 100 tiles strongly class 1, the rest weakly class 0
    s = np.zeros((100, 2))
    s[:, 0] = 0.3
    s[:, 1] = 0.1
    s[:10] = [0.1, 0.9]
    pred = classify_slide(None, ScoreMatrix(s), _bank(np.eye(2)))
    brute = [int(np.argmax(oracles.topk_brute(s, k))) for k in pred.ks]
    assert pred.predictions.tolist() == brute
    assert [pred.prediction_at(k) for k in (1, 5, 10)] == [1, 1, 1]
    assert pred.prediction_at(100) == 0


def test_classify_slide_with_manifest(rng):
    bank = _bank(_unit(rng, 3, 4))
    vecs = _unit(rng, 2, 4).astype(np.float32)
    m = SlideManifest("s", 512, 256, [(0, 0, 256), (256, 0, 256)], "s.cemb")
    pred = classify_slide(m, EmbeddingStore(vecs, None, True), bank, TopKConfig((1, 2)))
    d = pred.to_dict()
    assert d["slide_id"] == "s" and set(d["predictions"]) == {"1", "2"}


def test_select_k_evaluation_level():
    s_a = np.array([[0.9, 0.1], [0.0, 0.5], [0.0, 0.5]])  # K=1 -> 0, K=3 -> 1
    s_b = np.array([[0.2, 0.8]])
    bank = _bank(np.eye(2))
    preds = [classify_slide(None, ScoreMatrix(s), bank, TopKConfig((1, 3))) for s in (s_a, s_b)]
    best, table = select_k(preds, [1, 1])
    assert best == 3 and table[1] == 0.5 and table[3] == 1.0
    best, _ = select_k(preds, [0, 1])
    assert best == 1


def test_select_k_tie_smallest():
    bank = _bank(np.eye(2))
    preds = [classify_slide(None, ScoreMatrix(np.array([[1.0, 0.0]])), bank)]
    assert select_k(preds, [0])[0] == 1


# --- heatmaps ----------------------------------------------------------------------------

def test_colormap_table():
    assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
    assert COLORMAP[0].tolist() == [0, 0, 255] and COLORMAP[255].tolist() == [255, 0, 0]


def test_heatmap_all_equal_uniform():
    coords = [(0, 0, 4), (4, 0, 4)]
    img = heatmap(np.full((2, 1), 0.7), 0, 8, 4, coords)
    assert np.all(img == COLORMAP[MID_INDEX])


def test_heatmap_single_hot_tile():
    coords = [(x, y, 4) for y in (0, 4) for x in (0, 4)]
    s = np.zeros((4, 1))
    s[3] = 1.0
    img = heatmap(s, 0, 8, 8, coords)
    hot = np.all(img == COLORMAP[255], axis=2)
    assert hot[4:, 4:].all() and hot.sum() == 16


def test_heatmap_gradient_pixels():
    coords = [(0, 0, 2), (2, 0, 2), (4, 0, 2), (6, 0, 2)]
    s = np.array([[0.1], [0.2], [0.3], [0.4]])
    img = heatmap(s, 0, 10, 3, coords)
    for i, v in enumerate(s[:, 0]):
        idx = int(np.floor((v - 0.1) / 0.3 * 255 + 0.5))
        assert np.all(img[:2, 2 * i:2 * i + 2] == COLORMAP[idx])
    assert np.all(img[2:] == BACKGROUND_RGB) and np.all(img[:, 8:] == BACKGROUND_RGB)


def test_heatmap_errors():
    with pytest.raises(InvalidArgumentError):
        heatmap(np.zeros((1, 2)), 2, 4, 4, [(0, 0, 4)])
    with pytest.raises(ShapeError):
        heatmap(np.zeros((2, 2)), 0, 4, 4, [(0, 0, 4)])


# --- retrieval -----------------------------------------------------------------------------

def test_retrieve_single_item(rng):
    r = retrieve(rng.normal(size=3), rng.normal(size=(1, 3)), 5)
    assert [i for i, _ in r.ranked] == ["0"]


def test_retrieve_exact_item(rng):
    db = _unit(rng, 20, 6)
    r = retrieve(db[7], db, 3, truth=7)
    assert r.ranked[0][0] == "7" and abs(r.ranked[0][1] - 1.0) < 1e-12 and r.truth_rank == 1


def test_retrieve_store_ids(rng):
    store = EmbeddingStore(_unit(rng, 3, 4).astype(np.float32), ["a", "b", "c"], True)
    r = retrieve(store.vectors[1], store, 1)
    assert r.ranked[0][0] == "b"


def test_retrieve_oracle_500_cases():
    r = SeededRng(31)
    for case in range(500):
        n, d = int(r.integers(1, 100)), int(r.integers(2, 8))
        db = r.normal(size=(n, d))
        if case % 5 == 0 and n > 2:
            db[n // 2] = db[0]  # exact tie
        q = r.normal(size=d)
        order, _ = oracles.ranking_brute(q, db)
        res = retrieve(q, db, n, truth=n - 1)
        assert [int(i) for i, _ in res.ranked] == order
        assert res.truth_rank == order.index(n - 1) + 1
        sims = [s for _, s in res.ranked]
        assert all(a >= b for a, b in zip(sims, sims[1:]))


def test_retrieval_ranks_match_retrieve(rng):
    q, db = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
    db[4] = db[9]
    ranks = retrieval_ranks(q, db)
    assert ranks.tolist() == [retrieve(q[i], db, 1, truth=i).truth_rank for i in range(30)]


def test_retrieve_errors(rng):
    with pytest.raises(InvalidArgumentError):
        retrieve(rng.normal(size=3), np.zeros((0, 3)), 1)
    with pytest.raises(InvalidArgumentError):
        retrieve(rng.normal(size=3), rng.normal(size=(2, 3)), 0)


# --- estimators ----------------------------------------------------------------------------

def test_zero_shot_estimator(rng):
    bank = _bank(np.eye(3))
    X = np.eye(3)[[2, 0, 1]]
    clf = ZeroShotClassifier(bank)
    assert clf.predict(X).tolist() == [2, 0, 1]
    assert clf.fit().score(X, [2, 0, 1]) == 1.0
    with pytest.raises(InvalidArgumentError):
        ZeroShotClassifier().fit()


def test_topk_estimator_selects_k():
    bank = _bank(np.eye(2))
    slides = [np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]), np.array([[0.0, 1.0]])]
    clf = TopKPoolingClassifier(bank, ks=(1, 3)).fit(slides, [1, 1])
    assert clf.best_k_ == 3 and clf.predict(slides).tolist() == [1, 1]
    with pytest.raises(InvalidArgumentError):
        TopKPoolingClassifier(bank).predict(slides)
