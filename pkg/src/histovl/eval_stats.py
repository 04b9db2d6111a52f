"""Classification, retrieval and captioning metrics plus resampling statistics."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.stats import rankdata

from .exceptions import InvalidArgumentError, ShapeError, UndefinedMetricError
from .numerics.rng import SeededRng
from .validation import check_labels, check_positive_int

RECALL_KS = (1, 5, 10)


@dataclass
class LabeledPredictions:
    """Aligned truth labels, predicted labels and optional per-class scores."""
    y_true: np.ndarray
    y_pred: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.y_true = check_labels(self.y_true, name="y_true")
        self.y_pred = check_labels(self.y_pred, len(self.y_true), name="y_pred")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if len(self.scores) != len(self.y_true):
                raise ShapeError("scores and labels differ in length")

    def __len__(self):
        return len(self.y_true)

    def take(self, idx) -> "LabeledPredictions":
        return LabeledPredictions(self.y_true[idx], self.y_pred[idx],
                                  None if self.scores is None else self.scores[idx])


def _pair(y_true, y_pred):
    if isinstance(y_true, LabeledPredictions):
        return y_true.y_true, y_true.y_pred
    t = check_labels(y_true, name="y_true")
    return t, check_labels(y_pred, len(t), name="y_pred")


# --- classification ---------------------------------------------------------

def balanced_accuracy(y_true, y_pred=None, n_classes: int | None = None) -> float:
    """Mean per-class recall over the classes present in ``y_true``.

    With ``n_classes`` every class in ``range(n_classes)`` must occur.
    """
    t, p = _pair(y_true, y_pred)
    if t.size == 0:
        raise UndefinedMetricError("balanced accuracy of an empty set")
    classes = np.unique(t) if n_classes is None else np.arange(n_classes)
    recalls = []
    for c in classes:
        m = t == c
        if not m.any():
            raise UndefinedMetricError(f"class {c} has no samples")
        recalls.append(np.mean(p[m] == c))
    return float(np.mean(recalls))


def accuracy(y_true, y_pred=None) -> float:
    t, p = _pair(y_true, y_pred)
    if t.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(t == p))


def per_class_f1(y_true, y_pred=None):
    """Returns ``(classes, f1, support)``; zero denominators give F1 = 0."""
    t, p = _pair(y_true, y_pred)
    classes = np.union1d(t, p)
    f1 = np.zeros(len(classes))
    support = np.zeros(len(classes))
    for i, c in enumerate(classes):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        den = 2 * tp + fp + fn
        f1[i] = 2 * tp / den if den else 0.0
        support[i] = np.sum(t == c)
    return classes, f1, support


def support_weighted_mean(values, supports) -> float:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(supports, dtype=np.float64)
    if v.shape != w.shape or w.sum() <= 0:
        raise InvalidArgumentError("need matching values and positive total support")
    return float(np.sum(v * w) / w.sum())


def weighted_f1(y_true, y_pred=None) -> float:
    """Support-weighted mean of per-class F1."""
    _, f1, support = per_class_f1(y_true, y_pred)
    if support.sum() == 0:
        raise UndefinedMetricError("weighted F1 of an empty set")
    return support_weighted_mean(f1, support)


def binary_auc(y, score) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    y = np.asarray(y).astype(bool)
    s = np.asarray(score, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("scores must be finite")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    r = rankdata(s, method="average")
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_roc(y_true, scores=None) -> float:
    """Binary AUC for 1-D scores (positive class 1); otherwise the mean over
    every ordered class pair (i, j) of the AUC of column i separating class i
    from class j, restricted to samples of those two classes."""
    if isinstance(y_true, LabeledPredictions):
        y_true, scores = y_true.y_true, y_true.scores
    t = check_labels(y_true, name="y_true")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        if set(np.unique(t)) - {0, 1}:
            raise InvalidArgumentError("1-D scores need binary labels")
        return binary_auc(t == 1, s)
    if s.shape[0] != len(t):
        raise ShapeError("scores and labels differ in length")
    c = s.shape[1]
    present = np.unique(t)
    if len(present) != c or present[-1] != c - 1:
        raise UndefinedMetricError("every class needs at least one sample")
    vals = []
    for i in range(c):
        for j in range(c):
            if i != j:
                m = (t == i) | (t == j)
                vals.append(binary_auc(t[m] == i, s[m, i]))
    return float(np.mean(vals))


def cohens_kappa(y_true, y_pred=None, weighting: str = "none", n_classes: int | None = None) -> float:
    """Cohen's kappa, unweighted or with quadratic weights ((i - j) / (C - 1))**2."""
    t, p = _pair(y_true, y_pred)
    if t.size == 0:
        raise UndefinedMetricError("kappa of an empty set")
    c = int(max(t.max(), p.max()) + 1) if n_classes is None else n_classes
    obs = np.zeros((c, c))
    np.add.at(obs, (t, p), 1.0)
    obs /= obs.sum()
    exp = np.outer(obs.sum(axis=1), obs.sum(axis=0))
    i, j = np.indices((c, c))
    if weighting == "none":
        w = (i != j).astype(np.float64)
    elif weighting == "quadratic":
        w = ((i - j) / max(c - 1, 1)) ** 2
    else:
        raise InvalidArgumentError("weighting must be 'none' or 'quadratic'")
    num, den = np.sum(w * obs), np.sum(w * exp)
    if den == 0:
        if num == 0:
            return 1.0
        raise UndefinedMetricError("kappa undefined: zero expected disagreement")
    return float(1.0 - num / den)


def quadratic_kappa(y_true, y_pred=None, n_classes=None) -> float:
    return cohens_kappa(y_true, y_pred, "quadratic", n_classes)


# --- retrieval --------------------------------------------------------------

def _ranks(results):
    out = []
    for r in results:
        rank = getattr(r, "truth_rank", r)
        out.append(np.inf if rank is None else rank)
    return np.asarray(out, dtype=np.float64)


def recall_at_k(results, k: int) -> float:
    """Fraction of queries whose ground truth ranks within the top ``k``.

    ``results`` holds RetrievalResult objects or plain 1-based ranks.
    """
    k = check_positive_int(k, "k")
    r = _ranks(results)
    if r.size == 0:
        raise UndefinedMetricError("no queries")
    return float(np.mean(r <= k))


def mean_recall(results, ks=RECALL_KS) -> float:
    return float(np.mean([recall_at_k(results, k) for k in ks]))


# --- captioning -------------------------------------------------------------

def rouge1(candidate: str, reference: str) -> float:
    """Unigram F-measure over lowercased whitespace tokens (clipped counts)."""
    ref = reference.lower().split()
    if not ref:
        raise UndefinedMetricError("empty reference")
    cand = candidate.lower().split()
    if not cand:
        return 0.0
    overlap = sum((Counter(cand) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    prec, rec = overlap / len(cand), overlap / len(ref)
    return 2 * prec * rec / (prec + rec)


# --- resampling -------------------------------------------------------------

@dataclass
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    n_resamples: int = 1000
    level: float = 0.95
    n_redrawn: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bootstrap_ci(metric_fn, preds: LabeledPredictions, n: int = 1000, level: float = 0.95,
                 rng: SeededRng | None = None) -> ConfidenceInterval:
    """Percentile bootstrap over rows.

    Resample ``b`` draws from ``rng.child(b)`` (attempt ``a`` of a redraw from
    ``rng.child(b).child(a)``), so any split of the work gives the same CI.
    Resamples on which the metric is undefined are redrawn; more failures
    than resamples raises UndefinedMetricError.
    """
    n = check_positive_int(n, "n")
    if not 0 < level < 1:
        raise InvalidArgumentError("level must lie in (0, 1)")
    m = len(preds)
    if m < 2:
        raise InvalidArgumentError("bootstrap needs at least 2 samples")
    rng = SeededRng(0) if rng is None else rng
    point = float(metric_fn(preds))
    values = np.empty(n)
    failures = 0
    for b in range(n):
        stream = rng.child(b)
        attempt = 0
        while True:
            draw = stream if attempt == 0 else stream.child(attempt)
            idx = draw.integers(0, m, size=m)
            try:
                values[b] = metric_fn(preds.take(idx))
                break
            except UndefinedMetricError:
                failures += 1
                attempt += 1
                if failures > n:
                    raise UndefinedMetricError("metric undefined on most bootstrap resamples") from None
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha], method="inverted_cdf")
    return ConfidenceInterval(point, float(lo), float(hi), n, level, failures)


def _swap(a: LabeledPredictions, b: LabeledPredictions, mask):
    pa = np.where(mask, b.y_pred, a.y_pred)
    pb = np.where(mask, a.y_pred, b.y_pred)
    sa = sb = None
    if a.scores is not None and b.scores is not None:
        mm = mask.reshape((-1,) + (1,) * (a.scores.ndim - 1))
        sa = np.where(mm, b.scores, a.scores)
        sb = np.where(mm, a.scores, b.scores)
    return LabeledPredictions(a.y_true, pa, sa), LabeledPredictions(a.y_true, pb, sb)


def paired_permutation_test(preds_a: LabeledPredictions, preds_b: LabeledPredictions, metric_fn,
                            n: int = 1000, rng: SeededRng | None = None, strict: bool = False,
                            method: str = "auto") -> float:
    """Two-sided paired permutation p-value for ``metric(a) - metric(b)``.

    Each permutation swaps every paired prediction between the two models
    with probability 1/2. p is the share of permutations with
    ``|delta| >= |observed|`` (``>`` when ``strict``). The random method
    counts the identity as one of the ``n`` permutations, so p >= 1/n;
    ``"exhaustive"`` enumerates all 2**m swap patterns, and ``"auto"`` does
    so whenever 2**m <= n.
    """
    n = check_positive_int(n, "n")
    if len(preds_a) != len(preds_b):
        raise ShapeError("prediction sets differ in length")
    if not np.array_equal(preds_a.y_true, preds_b.y_true):
        raise InvalidArgumentError("paired predictions must share the same truth labels")
    m = len(preds_a)
    if method not in ("auto", "exhaustive", "random"):
        raise InvalidArgumentError("method must be auto, exhaustive or random")
    observed = abs(metric_fn(preds_a) - metric_fn(preds_b))
    tol = 1e-12 * max(1.0, abs(observed))

    def extreme(mask):
        pa, pb = _swap(preds_a, preds_b, mask)
        d = abs(metric_fn(pa) - metric_fn(pb))
        return d > observed + tol if strict else d >= observed - tol

    if method == "exhaustive" or (method == "auto" and m < 63 and 2 ** m <= n):
        hits = sum(extreme(np.array(bits, dtype=bool)) for bits in product((False, True), repeat=m))
        return hits / 2 ** m
    rng = SeededRng(0) if rng is None else rng
    hits = 0 if strict else 1  # identity permutation
    for i in range(n - 1):
        hits += extreme(rng.child(i).random(m) < 0.5)
    return hits / n


METRICS = {
    "balanced_accuracy": balanced_accuracy,
    "accuracy": accuracy,
    "weighted_f1": weighted_f1,
    "auc_roc": auc_roc,
    "kappa": cohens_kappa,
    "quadratic_kappa": quadratic_kappa,
}
