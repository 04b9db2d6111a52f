"""Zero-shot tile and slide classification, similarity heatmaps and retrieval."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data_io import EmbeddingStore, SlideManifest
from .exceptions import EmptySlideError, InvalidArgumentError, ShapeError
from .prompting import ClassEmbeddingBank
from .validation import check_labels, check_matrix, check_positive_int, check_same_width

DEFAULT_KS = (1, 5, 10, 50, 100)


# --- tiles ------------------------------------------------------------------

def classify_tile(embedding, bank: ClassEmbeddingBank):
    """Return ``(class index, per-class scores)``; ties go to the lowest index."""
    u = np.asarray(embedding, dtype=np.float64)
    if u.ndim != 1:
        raise ShapeError("classify_tile takes a single embedding")
    if u.shape[0] != bank.dim:
        raise ShapeError(f"embedding width {u.shape[0]} != class width {bank.dim}")
    s = bank.vectors @ u
    return int(np.argmax(s)), s


def tile_scores(embeddings, bank: ClassEmbeddingBank) -> np.ndarray:
    """(N, C) cosine scores of unit-norm tile embeddings against the bank."""
    u = check_matrix(embeddings, "embeddings", allow_empty=True)
    if u.size and u.shape[1] != bank.dim:
        raise ShapeError(f"embedding width {u.shape[1]} != class width {bank.dim}")
    return u.reshape(-1, bank.dim) @ bank.vectors.T


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (N, C)
    tile_coords: list = field(default_factory=list)
    slide_id: str = ""

    @property
    def n_tiles(self) -> int:
        return self.scores.shape[0]


def score_slide(manifest: SlideManifest, store: EmbeddingStore, bank: ClassEmbeddingBank) -> ScoreMatrix:
    manifest.validate(store)
    return ScoreMatrix(tile_scores(store.vectors, bank), list(manifest.tile_coords), manifest.slide_id)


# --- top-K pooling ----------------------------------------------------------

@dataclass(frozen=True)
class TopKConfig:
    ks: tuple = DEFAULT_KS

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise InvalidArgumentError("ks must be positive and strictly ascending")
        object.__setattr__(self, "ks", ks)


def topk_pool(scores, k: int) -> np.ndarray:
    """Per class, the mean of the ``k`` highest tile scores (all tiles if k > N)."""
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    k = check_positive_int(k, "k")
    if s.ndim != 2:
        raise ShapeError("scores must be (N, C)")
    if s.shape[0] == 0:
        raise EmptySlideError("slide has no tiles")
    top = -np.sort(-s, axis=0)[:min(k, s.shape[0])]
    return top.mean(axis=0)


@dataclass
class SlidePrediction:
    slide_id: str
    ks: tuple
    pooled: np.ndarray  # (len(ks), C)
    predictions: np.ndarray  # (len(ks),)

    def prediction_at(self, k) -> int:
        return int(self.predictions[self.ks.index(k)])

    def to_dict(self) -> dict:
        return {"slide_id": self.slide_id,
                "scores": {str(k): self.pooled[i].tolist() for i, k in enumerate(self.ks)},
                "predictions": {str(k): int(p) for k, p in zip(self.ks, self.predictions)}}


def classify_slide(manifest: SlideManifest | None, store, bank: ClassEmbeddingBank,
                   config: TopKConfig = TopKConfig()) -> SlidePrediction:
    """Pooled scores and argmax prediction for every candidate K.

    Choosing which K to report is done over a labelled set (see
    ``select_k``), never per slide.
    """
    if isinstance(store, ScoreMatrix):
        sm = store
    elif manifest is not None:
        sm = score_slide(manifest, store, bank)
    else:
        vecs = store.vectors if isinstance(store, EmbeddingStore) else store
        sm = ScoreMatrix(tile_scores(vecs, bank))
    pooled = np.stack([topk_pool(sm, k) for k in config.ks])
    sid = manifest.slide_id if manifest is not None else sm.slide_id
    return SlidePrediction(sid, config.ks, pooled, np.argmax(pooled, axis=1))


def select_k(predictions, labels, ks=None):
    """K with the highest balanced accuracy over a labelled slide set (ties: smallest K).

    ``predictions`` is a list of SlidePrediction. Returns ``(best_k, {k: bacc})``.
    """
    from .eval_stats import balanced_accuracy

    if not predictions:
        raise InvalidArgumentError("no slide predictions")
    ks = predictions[0].ks if ks is None else tuple(ks)
    y = check_labels(labels, len(predictions))
    table = {k: balanced_accuracy(y, np.array([p.prediction_at(k) for p in predictions])) for k in ks}
    best = max(ks, key=lambda k: (table[k], -k))
    return best, table


# --- heatmaps ---------------------------------------------------------------

def _build_colormap() -> np.ndarray:
    t = np.arange(256) / 255.0
    lo = np.clip(2 * t, 0, 1)[:, None]
    hi = np.clip(2 * t - 1, 0, 1)[:, None]
    blue, white, red = np.array([0, 0, 255.0]), np.array([255.0, 255, 255]), np.array([255.0, 0, 0])
    c = np.where(t[:, None] <= 0.5, blue + (white - blue) * lo, white + (red - white) * hi)
    return np.floor(c + 0.5).astype(np.uint8)


# 256 entries, blue (low) through white to red (high)
COLORMAP = _build_colormap()
BACKGROUND_RGB = (255, 255, 255)
MID_INDEX = 128


def normalize_scores(values) -> np.ndarray:
    """Min-max to [0, 1]; all-equal input maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def heatmap(scores, cls: int, width: int, height: int, tile_coords=None) -> np.ndarray:
    """RGB raster of one class's tile scores over the slide.

    Scores are min-max normalised over the slide, averaged where tiles
    overlap, and mapped through ``COLORMAP``. Pixels outside every tile are
    ``BACKGROUND_RGB``.
    """
    if isinstance(scores, ScoreMatrix):
        tile_coords = scores.tile_coords if tile_coords is None else tile_coords
        scores = scores.scores
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or not 0 <= cls < s.shape[1]:
        raise InvalidArgumentError(f"class {cls} out of range")
    if len(tile_coords) != s.shape[0]:
        raise ShapeError("one coordinate per tile required")
    out = np.empty((height, width, 3), dtype=np.uint8)
    out[:] = BACKGROUND_RGB
    if s.shape[0] == 0:
        return out
    norm = normalize_scores(s[:, cls])
    total = np.zeros((height, width))
    cover = np.zeros((height, width))
    for (x, y, side), v in zip(tile_coords, norm):
        total[y:y + side, x:x + side] += v
        cover[y:y + side, x:x + side] += 1
    hit = cover > 0
    idx = np.floor(total[hit] / cover[hit] * 255 + 0.5).astype(int)
    if s[:, cls].max() == s[:, cls].min():
        idx[:] = MID_INDEX
    out[hit] = COLORMAP[idx]
    return out


# --- retrieval --------------------------------------------------------------

@dataclass
class RetrievalResult:
    query_id: str
    ranked: list  # [(item id, similarity)], similarity nonincreasing
    truth_rank: int | None = None


def _as_db(database):
    if isinstance(database, EmbeddingStore):
        return database.vectors.astype(np.float64), list(database.ids) if database.ids else None
    return np.asarray(database, dtype=np.float64), None


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def retrieve(query, database, top_k: int, query_id: str = "", ids=None, truth=None) -> RetrievalResult:
    """Exact cosine ranking of ``database`` rows against ``query``.

    Ties keep database order. ``truth`` (an index) sets ``truth_rank`` to its
    1-based rank over the whole database.
    """
    top_k = check_positive_int(top_k, "top_k")
    db, store_ids = _as_db(database)
    if db.ndim != 2 or db.shape[0] == 0:
        raise InvalidArgumentError("empty database")
    q = np.asarray(query, dtype=np.float64)
    check_same_width(q, db)
    sims = _unit(db) @ _unit(q)
    order = np.argsort(-sims, kind="stable")
    ids = ids if ids is not None else (store_ids or [str(i) for i in range(len(db))])
    ranked = [(ids[i], float(sims[i])) for i in order[:top_k]]
    rank = None
    if truth is not None:
        rank = int(np.flatnonzero(order == truth)[0]) + 1
    return RetrievalResult(query_id, ranked, rank)


def retrieval_ranks(queries, database, truth=None) -> np.ndarray:
    """1-based rank of ``truth[i]`` (default i) for every query, same tie rule as ``retrieve``."""
    q = _unit(check_matrix(queries, "queries"))
    db, _ = _as_db(database)
    db = _unit(check_matrix(db, "database"))
    check_same_width(q, db)
    truth = np.arange(len(q)) if truth is None else np.asarray(truth)
    sims = q @ db.T
    s_true = sims[np.arange(len(q)), truth][:, None]
    idx = np.arange(db.shape[0])[None, :]
    ahead = (sims > s_true) | ((sims == s_true) & (idx < truth[:, None]))
    return ahead.sum(axis=1) + 1


# --- estimators -------------------------------------------------------------

class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Argmax over cosine similarity to a fixed class-embedding bank.

    Nothing is learned; ``fit`` only records the classes.
    """

    def __init__(self, bank: ClassEmbeddingBank | None = None):
        self.bank = bank

    def fit(self, X=None, y=None):
        if self.bank is None:
            raise InvalidArgumentError("ZeroShotClassifier needs a class-embedding bank")
        self.classes_ = np.arange(self.bank.n_classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "classes_"):
            self.fit()
        return tile_scores(X, self.bank)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)


class TopKPoolingClassifier(ClassifierMixin, BaseEstimator):
    """Slide classifier by top-K pooling of tile scores.

    ``X`` is a list of (N_i, d) tile-embedding arrays, one per slide. ``fit``
    selects the K with the highest balanced accuracy on the labelled slides;
    ``predict`` then pools with that K.
    """

    def __init__(self, bank: ClassEmbeddingBank | None = None, ks=DEFAULT_KS):
        self.bank = bank
        self.ks = ks

    def _predictions(self, X):
        if self.bank is None:
            raise InvalidArgumentError("TopKPoolingClassifier needs a class-embedding bank")
        cfg = TopKConfig(tuple(self.ks))
        return [classify_slide(None, x, self.bank, cfg) for x in X]

    def fit(self, X, y):
        preds = self._predictions(X)
        self.best_k_, self.k_scores_ = select_k(preds, y)
        self.classes_ = np.arange(self.bank.n_classes)
        return self

    def predict_all_k(self, X):
        return self._predictions(X)

    def decision_function(self, X) -> np.ndarray:
        k = getattr(self, "best_k_", None)
        if k is None:
            raise InvalidArgumentError("call fit before predict")
        return np.stack([topk_pool(tile_scores(x, self.bank), k) for x in X])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)
