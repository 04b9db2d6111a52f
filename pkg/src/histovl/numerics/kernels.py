"""Dense kernels with hand-written backward passes.

Forward functions return ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input gradients plus a
dict of parameter gradients. All math is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import InvalidArgumentError, ShapeError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def softmax(logits, temperature_scale: float = 1.0, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax of ``temperature_scale * logits``."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("softmax input contains non-finite values")
    if not (temperature_scale > 0 and np.isfinite(temperature_scale)):
        raise InvalidArgumentError("temperature_scale must be positive and finite")
    return _softmax(temperature_scale * x, axis)


def _softmax(x, axis=-1):
    # -inf entries (masked) are allowed here; every row needs one finite entry
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(dy, y, axis=-1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# --- linear -----------------------------------------------------------------

def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    d = w.shape[0]
    dw = x.reshape(-1, d).T @ dy.reshape(-1, w.shape[1])
    dx = dy @ w.T
    db = dy.reshape(-1, w.shape[1]).sum(axis=0) if has_bias else None
    return dx, dw, db


# --- layer norm -------------------------------------------------------------

def layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --- GELU (tanh approximation) ---------------------------------------------

def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# --- multi-head attention ---------------------------------------------------

@dataclass(frozen=True)
class AttentionalPoolerConfig:
    n_queries: int
    n_heads: int
    d_model: int
    d_head: int

    def __post_init__(self):
        if self.n_queries < 1 or self.n_heads < 1:
            raise InvalidArgumentError("n_queries and n_heads must be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise InvalidArgumentError("n_heads * d_head must equal d_model")


def _split(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def mha_forward(xq, xkv, p: dict, prefix: str, n_heads: int, causal: bool = False):
    """Multi-head attention over batched inputs of shape (B, L, d).

    Parameters live in ``p`` under ``prefix + {wq,bq,wk,wv,bv,wo,bo}``. Keys
    carry no bias: a key bias adds the same amount to every score of a query
    and has identically zero gradient.
    """
    d = xq.shape[-1]
    if xkv.shape[-1] != d:
        raise ShapeError(f"query width {d} != key/value width {xkv.shape[-1]}")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    q = _split(xq @ p[prefix + "wq"] + p[prefix + "bq"], n_heads)
    k = _split(xkv @ p[prefix + "wk"], n_heads)
    v = _split(xkv @ p[prefix + "wv"] + p[prefix + "bv"], n_heads)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    if causal:
        lq, lk = s.shape[-2], s.shape[-1]
        mask = np.triu(np.ones((lq, lk), dtype=bool), k=1)
        s = np.where(mask, -np.inf, s)
    a = _softmax(s, -1)
    o = _merge(a @ v)
    out = o @ p[prefix + "wo"] + p[prefix + "bo"]
    return out, (xq, xkv, q, k, v, a, o, scale, prefix, n_heads)


def mha_backward(dout, cache, p: dict):
    xq, xkv, q, k, v, a, o, scale, prefix, h = cache
    d = xq.shape[-1]
    g = {}
    g[prefix + "wo"] = o.reshape(-1, d).T @ dout.reshape(-1, d)
    g[prefix + "bo"] = dout.reshape(-1, d).sum(axis=0)
    do = _split(dout @ p[prefix + "wo"].T, h)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(da, a) * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    xq2 = xq.reshape(-1, d)
    xkv2 = xkv.reshape(-1, d)
    g[prefix + "wq"] = xq2.T @ dq.reshape(-1, d)
    g[prefix + "bq"] = dq.reshape(-1, d).sum(axis=0)
    g[prefix + "wk"] = xkv2.T @ dk.reshape(-1, d)
    g[prefix + "wv"] = xkv2.T @ dv.reshape(-1, d)
    g[prefix + "bv"] = dv.reshape(-1, d).sum(axis=0)
    dxq = dq @ p[prefix + "wq"].T
    dxkv = dk @ p[prefix + "wk"].T + dv @ p[prefix + "wv"].T
    return dxq, dxkv, g


def init_mha(p: dict, prefix: str, d: int, rng, std: float = 0.02):
    for name in ("wq", "wk", "wv", "wo"):
        p[prefix + name] = rng.normal(0.0, std, size=(d, d))
    for name in ("bq", "bv", "bo"):
        p[prefix + name] = np.zeros(d)


def identity_attention_weights(d: int) -> dict:
    eye = np.eye(d)
    z = np.zeros(d)
    return {"wq": eye, "bq": z, "wk": eye, "wv": eye, "bv": z, "wo": eye, "bo": z}


def attentional_pool(queries, keys_values, config: AttentionalPoolerConfig, weights: dict | None = None):
    """Pool a set of tokens into ``config.n_queries`` tokens.

    ``queries`` is (n_queries, d_model); ``keys_values`` is (N, d_model) or
    (B, N, d_model). With ``weights=None`` every projection is the identity.
    Returns (n_queries, d_model) or (B, n_queries, d_model).
    """
    queries = np.asarray(queries, dtype=np.float64)
    kv = np.asarray(keys_values, dtype=np.float64)
    if queries.ndim != 2 or queries.shape != (config.n_queries, config.d_model):
        raise ShapeError(f"queries must be ({config.n_queries}, {config.d_model}), got {queries.shape}")
    if kv.shape[-1] != config.d_model or kv.ndim not in (2, 3):
        raise ShapeError(f"keys_values must have {config.d_model} columns, got {kv.shape}")
    if kv.shape[-2] < 1:
        raise ShapeError("keys_values has no rows")
    batched = kv.ndim == 3
    if not batched:
        kv = kv[None]
    p = identity_attention_weights(config.d_model) if weights is None else weights
    xq = np.broadcast_to(queries, (kv.shape[0],) + queries.shape)
    out, _ = mha_forward(xq, kv, p, "", config.n_heads)
    return out if batched else out[0]


def pooler_forward(queries, kv, p: dict, prefix: str, n_heads: int):
    xq = np.broadcast_to(queries, (kv.shape[0],) + queries.shape)
    return mha_forward(xq, kv, p, prefix, n_heads)


def pooler_backward(dout, cache, p: dict):
    dxq, dkv, g = mha_backward(dout, cache, p)
    return dxq.sum(axis=0), dkv, g
