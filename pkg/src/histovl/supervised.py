"""Gated-attention MIL, an L-BFGS logistic-regression probe and few-shot splits."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import InvalidArgumentError, ShapeError, TrainingError
from .numerics.kernels import log_softmax
from .numerics.optim import AdamW, cosine_lr
from .numerics.rng import SeededRng
from .validation import check_labels, check_matrix

# --- gated attention MIL ----------------------------------------------------

ABMIL_HIDDEN = 512
ABMIL_ATTENTION = 384
ABMIL_DROPOUT = 0.25


def init_abmil(in_dim: int, n_classes: int, rng: SeededRng, hidden: int = ABMIL_HIDDEN,
               attn_dim: int = ABMIL_ATTENTION) -> dict:
    """Xavier-normal weights, zero biases."""
    def xavier(fi, fo):
        return rng.normal(0.0, math.sqrt(2.0 / (fi + fo)), size=(fi, fo))

    return {
        "w1": xavier(in_dim, hidden), "b1": np.zeros(hidden),
        "wa": xavier(hidden, attn_dim), "ba": np.zeros(attn_dim),
        "wb": xavier(hidden, attn_dim), "bb": np.zeros(attn_dim),
        "wc": xavier(attn_dim, 1), "bc": np.zeros(1),
        "wh": xavier(hidden, n_classes), "bh": np.zeros(n_classes),
    }


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def abmil_forward(bag, params: dict, train: bool = False, rng: SeededRng | None = None,
                  dropout: float = ABMIL_DROPOUT):
    """Slide logits from a bag of instance embeddings.

    ``h = relu(x W1 + b1)`` (inverted dropout on ``h`` in train mode),
    gated scores ``(tanh(h Wa + ba) * sigmoid(h Wb + bb)) Wc + bc``, softmax
    attention over the bag, ``z = sum_i a_i h_i`` and ``logits = z Wh + bh``.
    Returns ``(probabilities, attention, cache)``.
    """
    x = np.asarray(bag, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("bag must be a nonempty (N, d) array")
    if x.shape[1] != params["w1"].shape[0]:
        raise ShapeError(f"instance width {x.shape[1]} != model input {params['w1'].shape[0]}")
    pre = x @ params["w1"] + params["b1"]
    h = np.maximum(pre, 0.0)
    keep = None
    if train and dropout > 0:
        if rng is None:
            raise InvalidArgumentError("train mode needs an rng for dropout")
        keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * keep
    ta = np.tanh(h @ params["wa"] + params["ba"])
    sb = _sigmoid(h @ params["wb"] + params["bb"])
    g = ta * sb
    s = (g @ params["wc"])[:, 0] + params["bc"][0]
    e = np.exp(s - s.max())
    a = e / e.sum()
    z = a @ h
    logits = z @ params["wh"] + params["bh"]
    probs = np.exp(log_softmax(logits))
    cache = (x, pre, h, keep, ta, sb, g, a, z, logits)
    return probs, a, cache


def abmil_loss(bag, label: int, params: dict, train=False, rng=None, dropout=ABMIL_DROPOUT, need_grad=True):
    """Cross-entropy of one slide and, optionally, its parameter gradients."""
    probs, _, cache = abmil_forward(bag, params, train, rng, dropout)
    x, pre, h, keep, ta, sb, g, a, z, logits = cache
    loss = -float(log_softmax(logits)[label])
    if not need_grad:
        return loss, None
    grads = {}
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    grads["wh"] = np.outer(z, dlogits)
    grads["bh"] = dlogits
    dz = params["wh"] @ dlogits
    dh = np.outer(a, dz)
    da = h @ dz
    ds = a * (da - np.dot(a, da))
    grads["wc"] = (g.T @ ds)[:, None]
    grads["bc"] = np.array([ds.sum()])
    dg = np.outer(ds, params["wc"][:, 0])
    dua = dg * sb * (1.0 - ta * ta)
    dub = dg * ta * sb * (1.0 - sb)
    grads["wa"] = h.T @ dua
    grads["ba"] = dua.sum(axis=0)
    grads["wb"] = h.T @ dub
    grads["bb"] = dub.sum(axis=0)
    dh = dh + dua @ params["wa"].T + dub @ params["wb"].T
    if keep is not None:
        dh = dh * keep
    dpre = dh * (pre > 0)
    grads["w1"] = x.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return loss, grads


@dataclass
class TrainingSchedule:
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    dropout: float = ABMIL_DROPOUT

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise InvalidArgumentError("invalid training schedule")


def inverse_frequency_weights(labels) -> np.ndarray:
    """Sampling probability per slide, proportional to 1 / (size of its class)."""
    y = check_labels(labels)
    counts = np.bincount(y)
    w = 1.0 / counts[y]
    return w / w.sum()


def train_abmil(bags, labels, schedule: TrainingSchedule = TrainingSchedule(), rng: SeededRng | None = None,
                n_classes: int | None = None, hidden=ABMIL_HIDDEN, attn_dim=ABMIL_ATTENTION):
    """AdamW with cosine decay, one slide per step, inverse-frequency sampling.

    An epoch is ``len(bags)`` draws with replacement. Returns
    ``(params, report)`` where the report holds the per-epoch mean loss and a
    ``degenerate`` flag for single-class data.
    """
    y = check_labels(labels, len(bags))
    if len(y) == 0:
        raise InvalidArgumentError("no training slides")
    rng = SeededRng(0) if rng is None else rng
    c = int(y.max() + 1) if n_classes is None else n_classes
    in_dim = np.asarray(bags[0]).shape[1]
    params = init_abmil(in_dim, c, rng.child(0), hidden, attn_dim)
    opt = AdamW(params, lr=schedule.lr, betas=tuple(schedule.betas), weight_decay=schedule.weight_decay,
                no_decay=[k for k in params if k.startswith("b")])
    probs = inverse_frequency_weights(y)
    n = len(y)
    total = schedule.epochs * n
    draw_rng, drop_rng = rng.child(1), rng.child(2)
    curve = []
    step = 0
    for epoch in range(schedule.epochs):
        order = draw_rng.choice(n, n, p=probs)
        losses = []
        for i in order:
            loss, grads = abmil_loss(bags[i], int(y[i]), params, True, drop_rng, schedule.dropout)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            opt.step(params, grads, cosine_lr(step, total, schedule.lr, 0, 0.0))
            losses.append(loss)
            step += 1
        curve.append(float(np.mean(losses)))
    report = {"loss_curve": curve, "degenerate": bool(len(np.unique(y)) < 2), "n_classes": c}
    return params, report


class ABMILClassifier(ClassifierMixin, BaseEstimator):
    """Gated-attention MIL slide classifier over bags of tile embeddings."""

    def __init__(self, hidden=ABMIL_HIDDEN, attn_dim=ABMIL_ATTENTION, dropout=ABMIL_DROPOUT, epochs=20,
                 lr=1e-4, weight_decay=1e-5, n_classes=None, seed=0):
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y):
        sched = TrainingSchedule(self.epochs, self.lr, self.weight_decay, dropout=self.dropout)
        self.params_, self.report_ = train_abmil(list(X), y, sched, SeededRng(self.seed), self.n_classes,
                                                 self.hidden, self.attn_dim)
        self.classes_ = np.arange(self.report_["n_classes"])
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise InvalidArgumentError("call fit before predict")
        return np.stack([abmil_forward(b, self.params_)[0] for b in X])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def attention(self, bag) -> np.ndarray:
        return abmil_forward(bag, self.params_)[1]


# --- linear probe -----------------------------------------------------------

@dataclass
class LinearProbeConfig:
    lam: float
    max_iter: int = 800
    tol: float = 1e-6
    history: int = 10

    @classmethod
    def for_problem(cls, n_features: int, n_classes: int, **kw) -> "LinearProbeConfig":
        return cls(lam=probe_lambda(n_features, n_classes), **kw)

    def __post_init__(self):
        if not self.lam > 0 or self.max_iter < 1 or self.history < 1:
            raise InvalidArgumentError("invalid probe configuration")


def probe_lambda(n_features: int, n_classes: int) -> float:
    """l2 coefficient 100 / (M * C)."""
    return 100.0 / (n_features * n_classes)


def probe_objective(theta, X, Y, lam):
    """Mean softmax cross-entropy + (lam / 2) ||W||^2 and its gradient.

    ``theta`` packs ``W`` (M x C, row-major) followed by ``b`` (C).
    """
    n, m = X.shape
    c = Y.shape[1]
    W = theta[:m * c].reshape(m, c)
    b = theta[m * c:]
    logp = log_softmax(X @ W + b)
    f = -np.sum(Y * logp) / n + 0.5 * lam * np.sum(W * W)
    d = (np.exp(logp) - Y) / n
    gW = X.T @ d + lam * W
    return f, np.concatenate([gW.ravel(), d.sum(axis=0)])


def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
    return t if np.isfinite(t) else None


def strong_wolfe(fun, x, f0, g0, p, c1=1e-4, c2=0.9, alpha1=1.0, max_iter=30):
    """Line search satisfying the strong Wolfe conditions (bracket, then zoom).

    Returns ``(alpha, f, g)`` or ``None`` when no acceptable step is found.
    """
    dg0 = float(g0 @ p)
    if dg0 >= 0:
        return None

    def phi(a):
        f, g = fun(x + a * p)
        return f, g, float(g @ p)

    def zoom(lo, hi):
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi, d_hi = hi
        for _ in range(max_iter):
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            left, right = min(a_lo, a_hi), max(a_lo, a_hi)
            width = right - left
            if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
                a = 0.5 * (a_lo + a_hi)
            f, g, d = phi(a)
            if f > f0 + c1 * a * dg0 or f >= f_lo:
                a_hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * dg0:
                    return a, f, g
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, f, d
            if abs(a_hi - a_lo) < 1e-16:
                break
        return None

    prev = (0.0, f0, dg0)
    a = alpha1
    for i in range(max_iter):
        f, g, d = phi(a)
        if not np.isfinite(f):
            a *= 0.5
            continue
        if f > f0 + c1 * a * dg0 or (i > 0 and f >= prev[1]):
            return zoom(prev, (a, f, d))
        if abs(d) <= -c2 * dg0:
            return a, f, g
        if d >= 0:
            return zoom((a, f, d), prev)
        prev = (a, f, d)
        a *= 2.0
    return None


def lbfgs(fun, x0, max_iter=800, tol=1e-6, history=10):
    """Limited-memory BFGS with the two-loop recursion.

    ``fun(x)`` returns ``(f, grad)``. Stops when ``||grad|| < tol``, after
    ``max_iter`` iterations, or when the line search fails. Returns
    ``(x, f, info)``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    s_hist, y_hist, rho_hist = [], [], []
    status = "max_iter"
    it = 0
    for it in range(max_iter):
        if np.linalg.norm(g) < tol:
            status = "converged"
            break
        q = g.copy()
        alphas = []
        for s, yv, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * yv
        gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1]) if s_hist else 1.0 / max(1.0, np.linalg.norm(g))
        r = gamma * q
        for (s, yv, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            r += s * (a - rho * (yv @ r))
        p = -r
        res = strong_wolfe(fun, x, f, g, p)
        if res is None:
            status = "line_search_failed"
            break
        step, f_new, g_new = res
        s = step * p
        yv = g_new - g
        x = x + s
        f, g = f_new, g_new
        sy = float(s @ yv)
        if sy > 1e-12:
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
    else:
        it = max_iter
        if np.linalg.norm(g) < tol:
            status = "converged"
    return x, f, {"iterations": it, "status": status, "grad_norm": float(np.linalg.norm(g))}


def linear_probe_fit(features, labels, config: LinearProbeConfig | None = None, n_classes: int | None = None):
    """Multinomial logistic regression. Returns ``(W (M x C), b (C), info)``."""
    X = check_matrix(features, "features")
    y = check_labels(labels, len(X))
    c = int(y.max() + 1) if n_classes is None else n_classes
    if len(np.unique(y)) < 2:
        raise InvalidArgumentError("linear probe needs at least two classes")
    m = X.shape[1]
    config = LinearProbeConfig.for_problem(m, c) if config is None else config
    Y = np.eye(c)[y]
    theta, f, info = lbfgs(lambda t: probe_objective(t, X, Y, config.lam), np.zeros(m * c + c),
                           config.max_iter, config.tol, config.history)
    info["objective"] = float(f)
    info["lambda"] = config.lam
    return theta[:m * c].reshape(m, c), theta[m * c:], info


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Logistic-regression probe on frozen embeddings; ``lam=None`` uses 100 / (M * C)."""

    def __init__(self, lam=None, max_iter=800, tol=1e-6):
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_labels(y, len(X))
        c = int(y.max() + 1)
        lam = probe_lambda(X.shape[1], c) if self.lam is None else self.lam
        self.coef_, self.intercept_, self.info_ = linear_probe_fit(
            X, y, LinearProbeConfig(lam, self.max_iter, self.tol), c)
        self.classes_ = np.arange(c)
        return self

    def decision_function(self, X):
        return check_matrix(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


# --- few-shot ---------------------------------------------------------------

@dataclass
class FewShotPlan:
    shots: tuple = (1, 2, 4, 8, 16)
    replicates: int = 5

    def __post_init__(self):
        if not self.shots or any(s < 1 for s in self.shots) or self.replicates < 1:
            raise InvalidArgumentError("shots and replicates must be positive")


@dataclass
class FewShotSplit:
    shots: int
    replicate: int
    indices: np.ndarray
    clamped: list = field(default_factory=list)  # classes with fewer examples than requested


def build_fewshot_splits(labels, plan: FewShotPlan, rng: SeededRng, classes=None) -> list[FewShotSplit]:
    """Stratified draws without replacement, ``plan.replicates`` per shot count.

    Replicate ``r`` at ``n_c`` shots uses ``rng.child(n_c).child(r)``. Classes
    with fewer than ``n_c`` examples contribute all of them (with a warning).
    """
    y = check_labels(labels)
    classes = np.unique(y) if classes is None else np.asarray(classes)
    pools = {}
    for c in classes:
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            raise InvalidArgumentError(f"class {c} absent from the training pool")
        pools[int(c)] = idx
    out = []
    for n_c in plan.shots:
        for r in range(plan.replicates):
            stream = rng.child(int(n_c)).child(r)
            chosen, clamped = [], []
            for c, idx in pools.items():
                take = n_c
                if n_c > idx.size:
                    clamped.append(c)
                    take = idx.size
                chosen.append(idx[stream.choice(idx.size, take, replace=False)])
            if clamped:
                warnings.warn(f"{n_c} shots exceed the pool for classes {clamped}; using all available",
                              stacklevel=2)
            out.append(FewShotSplit(int(n_c), r, np.sort(np.concatenate(chosen)), clamped))
    return out


def run_fewshot(train_bags, train_labels, test_bags, test_labels, plan: FewShotPlan, rng: SeededRng,
                schedule: TrainingSchedule = TrainingSchedule(), n_classes=None):
    """Train ABMIL on every split and score it on the fixed test set.

    Returns one dict per (shots, replicate) with balanced accuracy.
    """
    from .eval_stats import balanced_accuracy

    y = check_labels(train_labels)
    c = int(y.max() + 1) if n_classes is None else n_classes
    rows = []
    for split in build_fewshot_splits(y, plan, rng.child(0)):
        seed_rng = rng.child(1).child(split.shots).child(split.replicate)
        params, report = train_abmil([train_bags[i] for i in split.indices], y[split.indices], schedule,
                                     seed_rng, c)
        pred = np.array([np.argmax(abmil_forward(b, params)[0]) for b in test_bags])
        rows.append({"shots": split.shots, "replicate": split.replicate,
                     "balanced_accuracy": balanced_accuracy(test_labels, pred),
                     "final_loss": report["loss_curve"][-1]})
    return rows
