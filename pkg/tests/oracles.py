"""Independent brute-force references shared by the unit and acceptance tests.

Everything here is written in the most literal way available (explicit loops,
Python sorting) so that it shares no code path with the library.
"""
import itertools
import math
import time

import numpy as np

from histovl.coca import CocaConfig, captioning_loss, contrastive_loss, init_params
from histovl.numerics import SeededRng, directional_check, finite_diff_check
from histovl.numerics.kernels import init_mha, pooler_backward, pooler_forward
from histovl.supervised import abmil_loss, init_abmil

GRAD_TOL = 1e-4


# --- straight-line references -------------------------------------------------

def softmax_ref(x):
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [v / s for v in e]


def attention_ref(queries, kv, p, n_heads):
    """Scaled dot-product multi-head attention, one query and head at a time."""
    d = queries.shape[1]
    dh = d // n_heads
    q = queries @ p["wq"] + p["bq"]
    k = kv @ p["wk"]
    v = kv @ p["wv"] + p["bv"]
    out = np.zeros((len(queries), d))
    for i in range(len(queries)):
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(len(kv))]
            w = softmax_ref(scores)
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(len(kv)))
    return out @ p["wo"] + p["bo"]


def contrastive_ref(u, v, tau):
    m = len(u)
    total = 0.0
    for i in range(m):
        row = [tau * float(u[i] @ v[j]) for j in range(m)]
        total -= math.log(softmax_ref(row)[i])
    for j in range(m):
        col = [tau * float(u[i] @ v[j]) for i in range(m)]
        total -= math.log(softmax_ref(col)[j])
    return total / (2 * m)


def topk_brute(scores, k):
    scores = np.asarray(scores)
    out = []
    for c in range(scores.shape[1]):
        col = sorted(scores[:, c].tolist(), reverse=True)[:min(k, len(scores))]
        out.append(sum(col) / len(col))
    return np.array(out)


def ranking_brute(query, database):
    """Indices by descending cosine similarity, ties to the lower index."""
    q = query / np.linalg.norm(query)
    sims = [float(q @ (row / np.linalg.norm(row))) for row in database]
    return sorted(range(len(database)), key=lambda i: (-sims[i], i)), sims


def stitch_brute(height, width, n_classes, tiles):
    """Per-pixel mean of the scores of every tile covering it (NaN where uncovered)."""
    out = np.full((n_classes, height, width), np.nan)
    for y in range(height):
        for x in range(width):
            cover = [s for (tx, ty, side), s in tiles if tx <= x < tx + side and ty <= y < ty + side]
            if cover:
                out[:, y, x] = np.sum(cover, axis=0) / len(cover)
    return out


def permutation_exhaustive(correct_a, correct_b, metric, strict=False):
    """p-value over all 2^m swap patterns of paired per-sample outcomes."""
    m = len(correct_a)
    obs = abs(metric(correct_a) - metric(correct_b))
    hits = 0
    for pattern in itertools.product([False, True], repeat=m):
        a = [cb if s else ca for ca, cb, s in zip(correct_a, correct_b, pattern)]
        b = [ca if s else cb for ca, cb, s in zip(correct_a, correct_b, pattern)]
        d = abs(metric(a) - metric(b))
        hits += d > obs if strict else d >= obs - 1e-12
    return hits / 2 ** m


def probe_objective_ref(W, b, X, y, lam):
    total = 0.0
    for xi, yi in zip(X, y):
        logits = xi @ W + b
        total -= math.log(softmax_ref(logits.tolist())[yi])
    return total / len(X) + 0.5 * lam * float(np.sum(W * W))


def gd_oracle(X, y, lam, n_classes, steps=10_000):
    """Plain gradient descent at step 1/L on the probe objective."""
    n, m = X.shape
    Y = np.eye(n_classes)[y]
    # the softmax cross-entropy Hessian is bounded by 1/2 * ||X~||^2 / n
    Xt = np.hstack([X, np.ones((n, 1))])
    lip = 0.5 * np.linalg.norm(Xt, 2) ** 2 / n + lam
    W = np.zeros((m, n_classes))
    b = np.zeros(n_classes)
    for _ in range(steps):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - Y) / n
        W -= (X.T @ d + lam * W) / lip
        b -= d.sum(axis=0) / lip
    return W, b


# --- gradient suite -------------------------------------------------------------

def random_coca_point(cfg, rng):
    """Toy parameters spread away from initialisation so attention is not uniform."""
    p = init_params(cfg, rng)
    for k, v in p.items():
        if k.endswith(".g"):
            p[k] = 1 + 0.3 * rng.normal(size=v.shape)
        elif v.ndim == 2:
            boost = 3 if (".q" in k or "pos" in k or "emb" in k) else 1
            p[k] = rng.normal(size=v.shape) / np.sqrt(v.shape[0]) * boost
        elif v.ndim == 1:
            p[k] = 0.1 * rng.normal(size=v.shape)
    p["log_tau"] = np.array(np.log(5.0))
    return p


GRAD_CFG = CocaConfig(vocab_size=20, d_model=16, n_heads=2, n_caption_queries=3, embed_dim=8,
                      n_image_layers=1, n_text_layers=1, n_decoder_layers=1)


def _contrastive_point(rng):
    m, d = 1 + int(rng.integers(1, 6)), 6
    u = rng.normal(size=(m, d))
    v = rng.normal(size=(m, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    tau = float(rng.uniform(1.0, 10.0))
    _, g = contrastive_loss(u, v, tau)
    x0 = np.concatenate([u.ravel(), v.ravel(), [tau]])
    n = u.size

    def f(x):
        return contrastive_loss(x[:n].reshape(u.shape), x[n:2 * n].reshape(v.shape), x[-1])[0]

    return finite_diff_check(f, np.concatenate([g["u"].ravel(), g["v"].ravel(), [g["tau"]]]), x0)


def _captioning_point(rng):
    p = random_coca_point(GRAD_CFG, rng)
    imgs = rng.normal(size=(2, GRAD_CFG.image_size, GRAD_CFG.image_size, 3))
    seqs = [np.concatenate([[1], rng.integers(4, GRAD_CFG.vocab_size, size=int(rng.integers(0, 6))), [2]])
            for _ in range(2)]
    _, g = captioning_loss(p, GRAD_CFG, imgs, seqs)

    def f(q):
        return captioning_loss(q, GRAD_CFG, imgs, seqs, need_grad=False)[0]

    # contrastive-only parameters carry no captioning gradient
    keys = [k for k in sorted(p) if np.any(g[k] != 0)]
    return max(directional_check(f, g, p, rng, keys=[k]) for k in keys)


def _pool_point(rng):
    d, heads, nq, n = 8, 2, int(rng.integers(1, 4)), int(rng.integers(1, 7))
    p = {}
    init_mha(p, "", d, rng, std=0.5)
    for k in ("bq", "bv", "bo"):
        p[k] = 0.1 * rng.normal(size=d)
    queries = rng.normal(size=(nq, d))
    kv = rng.normal(size=(2, n, d))
    r = rng.normal(size=(2, nq, d))
    out, cache = pooler_forward(queries, kv, p, "", heads)
    dq, dkv, g = pooler_backward(r, cache, p)

    def loss(pp, qq, kk):
        return float(np.sum(pooler_forward(qq, kk, pp, "", heads)[0] * r))

    errs = [finite_diff_check(lambda x: loss(p, x.reshape(queries.shape), kv), dq, queries),
            finite_diff_check(lambda x: loss(p, queries, x.reshape(kv.shape)), dkv, kv)]
    for k in sorted(g):
        errs.append(_check_key(lambda pp: loss(pp, queries, kv), g, p, rng, k))
    return max(errs)


def _abmil_point(rng):
    c = int(rng.integers(2, 4))
    params = init_abmil(6, c, rng, hidden=10, attn_dim=7)
    for k in params:
        if k.startswith("b"):
            params[k] = 0.1 * rng.normal(size=params[k].shape)
    bag = rng.normal(size=(int(rng.integers(1, 8)), 6))
    label = int(rng.integers(0, c))
    _, g = abmil_loss(bag, label, params)

    def f(pp):
        return abmil_loss(bag, label, pp, need_grad=False)[0]

    return max(_check_key(f, g, params, rng, k) for k in sorted(params))


def _check_key(f, grads, params, rng, key, step=1e-5):
    """Directional check of one tensor; an identically-zero gradient is checked in absolute terms.

    The attention-score bias is such a tensor: softmax ignores a shared shift.
    """
    if np.linalg.norm(grads[key]) > 1e-12:
        return directional_check(f, grads, params, rng, step, keys=[key])
    d = rng.normal(size=params[key].shape)
    moved = [dict(params, **{key: params[key] + s * d}) for s in (step, -step)]
    slope = abs(f(moved[0]) - f(moved[1])) / (2 * step)
    return 0.0 if slope < 1e-8 else slope


GRADIENT_COMPONENTS = {
    "contrastive_loss": _contrastive_point,
    "captioning_loss": _captioning_point,
    "attentional_pool": _pool_point,
    "abmil": _abmil_point,
}


def gradient_suite(n_points=20, seed=0, components=None):
    """Worst relative error per component over ``n_points`` random points, plus runtime."""
    t0 = time.monotonic()
    worst = {}
    for name in components or GRADIENT_COMPONENTS:
        fn = GRADIENT_COMPONENTS[name]
        worst[name] = max(fn(SeededRng(seed).child(hash_name(name)).child(i)) for i in range(n_points))
    return worst, time.monotonic() - t0


def hash_name(name):
    return sum((i + 1) * ord(ch) for i, ch in enumerate(name))
