"""Toy contrastive-captioner: losses, backprop, training and top-K decoding.

Architecture (all float64, pre-LN transformer blocks):

* image encoder: 8x8 patch projection + learned positions, ``n_image_layers``
  self-attention blocks, final LayerNorm, then two attentional poolers; the
  contrastive pooler has a single query, the caption pooler
  ``n_caption_queries`` queries.
* text encoder: token table + learned positions, a learned CLS token placed
  right after EOS, ``n_text_layers`` causal blocks, final LayerNorm.
* multimodal decoder: ``n_decoder_layers`` blocks of causal self-attention,
  cross-attention to the caption-pooler tokens and an MLP, final LayerNorm
  and a language-model head.

Contrastive embeddings are the l2-normalised linear projections of the
contrastive-pooler token and of the CLS position.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data_io import read_checkpoint, write_checkpoint
from .exceptions import InvalidArgumentError, NumericalError, TrainingError
from .numerics import kernels as K
from .numerics.optim import AdamW, cosine_lr
from .numerics.rng import SeededRng

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]
MAX_CAPTION_LEN = 128
_WORD = re.compile(r"[a-z0-9&'\-]+|[.,;:]")


# --- tokenizer --------------------------------------------------------------

class Tokenizer:
    """Lower-cased whitespace tokenizer; ``.``/``,`` are separate tokens."""

    def __init__(self, words):
        self.vocab = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def from_texts(cls, texts) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(cls.split(t))
        return cls(sorted(words))

    @staticmethod
    def split(text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str, max_len: int = MAX_CAPTION_LEN) -> np.ndarray:
        ids = [self.index.get(w, UNK) for w in self.split(text)][:max_len]
        return np.array([BOS] + ids + [EOS], dtype=np.int64)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            w = self.vocab[i]
            if w in ".,;:" and out:
                out[-1] += w
            else:
                out.append(w)
        return " ".join(out)


# --- config / params --------------------------------------------------------

@dataclass
class CocaConfig:
    vocab_size: int
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_image_layers: int = 2
    n_text_layers: int = 2
    n_decoder_layers: int = 2
    mlp_ratio: int = 2
    n_caption_queries: int = 16
    embed_dim: int = 64
    max_len: int = MAX_CAPTION_LEN
    init_temperature: float = 0.07
    max_logit_scale: float = 100.0

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def _init_block(p, pre, d, hidden, rng, cross=False):
    for ln in ("ln1", "ln2") + (("lnx",) if cross else ()):
        p[f"{pre}{ln}.g"] = np.ones(d)
        p[f"{pre}{ln}.b"] = np.zeros(d)
    K.init_mha(p, pre + "attn.", d, rng)
    if cross:
        K.init_mha(p, pre + "xattn.", d, rng)
    p[pre + "mlp.w1"] = rng.normal(0.0, 0.02, size=(d, hidden))
    p[pre + "mlp.b1"] = np.zeros(hidden)
    p[pre + "mlp.w2"] = rng.normal(0.0, 0.02, size=(hidden, d))
    p[pre + "mlp.b2"] = np.zeros(d)


def init_params(cfg: CocaConfig, rng: SeededRng) -> dict:
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    p = {}
    p["img.patch.w"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.patch_dim), size=(cfg.patch_dim, d))
    p["img.patch.b"] = np.zeros(d)
    p["img.pos"] = rng.normal(0.0, 0.02, size=(cfg.n_patches, d))
    for i in range(cfg.n_image_layers):
        _init_block(p, f"img.blk{i}.", d, h, rng)
    p["img.ln.g"], p["img.ln.b"] = np.ones(d), np.zeros(d)
    p["pool_con.q"] = rng.normal(0.0, 0.02, size=(1, d))
    K.init_mha(p, "pool_con.attn.", d, rng)
    p["pool_cap.q"] = rng.normal(0.0, 0.02, size=(cfg.n_caption_queries, d))
    K.init_mha(p, "pool_cap.attn.", d, rng)
    p["img.proj"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.embed_dim))
    p["txt.emb"] = rng.normal(0.0, 0.02, size=(cfg.vocab_size, d))
    p["txt.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_len + 3, d))
    p["txt.cls"] = rng.normal(0.0, 0.02, size=(d,))
    for i in range(cfg.n_text_layers):
        _init_block(p, f"txt.blk{i}.", d, h, rng)
    p["txt.ln.g"], p["txt.ln.b"] = np.ones(d), np.zeros(d)
    p["txt.proj"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.embed_dim))
    for i in range(cfg.n_decoder_layers):
        _init_block(p, f"dec.blk{i}.", d, h, rng, cross=True)
    p["dec.ln.g"], p["dec.ln.b"] = np.ones(d), np.zeros(d)
    p["dec.head.w"] = rng.normal(0.0, 0.02, size=(d, cfg.vocab_size))
    p["dec.head.b"] = np.zeros(cfg.vocab_size)
    p["log_tau"] = np.array(math.log(1.0 / cfg.init_temperature))
    return p


def decoder_param_names(params: dict) -> list[str]:
    """Names of the autoregressive text-model parameters (decoder + head)."""
    return sorted(k for k in params if k.startswith("dec."))


def no_decay_names(params: dict) -> list[str]:
    return [k for k in params if k.endswith(".b") or k.endswith(".g") or k.endswith(("bq", "bv", "bo"))
            or k.endswith(("b1", "b2")) or k == "log_tau"]


# --- transformer block ------------------------------------------------------

def _block_forward(x, p, pre, n_heads, causal, kv=None):
    h1, c1 = K.layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, ca = K.mha_forward(h1, h1, p, pre + "attn.", n_heads, causal)
    x = x + a
    cx = None
    if kv is not None:
        hx, clx = K.layernorm_forward(x, p[pre + "lnx.g"], p[pre + "lnx.b"])
        xa, cxa = K.mha_forward(hx, kv, p, pre + "xattn.", n_heads)
        x = x + xa
        cx = (clx, cxa)
    h2, c2 = K.layernorm_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m1, cl1 = K.linear_forward(h2, p[pre + "mlp.w1"], p[pre + "mlp.b1"])
    g, cg = K.gelu_forward(m1)
    m2, cl2 = K.linear_forward(g, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    return x + m2, (pre, c1, ca, cx, c2, cl1, cg, cl2)


def _block_backward(dx, cache, p, grads):
    pre, c1, ca, cx, c2, cl1, cg, cl2 = cache
    dg, grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = K.linear_backward(dx, cl2)
    dm1 = K.gelu_backward(dg, cg)
    dh2, grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = K.linear_backward(dm1, cl1)
    dln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = K.layernorm_backward(dh2, c2)
    dx = dx + dln
    dkv = None
    if cx is not None:
        clx, cxa = cx
        dhx, dkv, g = K.mha_backward(dx, cxa, p)
        grads.update(g)
        dln, grads[pre + "lnx.g"], grads[pre + "lnx.b"] = K.layernorm_backward(dhx, clx)
        dx = dx + dln
    dq, dk, g = K.mha_backward(dx, ca, p)
    grads.update(g)
    dln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = K.layernorm_backward(dq + dk, c1)
    return dx + dln, dkv


# --- encoders ---------------------------------------------------------------

def preprocess_images(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0
    return (np.asarray(x, dtype=np.float64) - 0.5) / 0.25


def patchify(x, patch):
    b, hgt, wid, c = x.shape
    gh, gw = hgt // patch, wid // patch
    x = x.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def image_forward(p, cfg: CocaConfig, images):
    """Returns (u_raw, caption_tokens, cache); images are preprocessed floats."""
    if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise InvalidArgumentError(f"images must be {cfg.image_size}x{cfg.image_size}x3")
    patches = patchify(images, cfg.patch_size)
    h, cpe = K.linear_forward(patches, p["img.patch.w"], p["img.patch.b"])
    h = h + p["img.pos"]
    blocks = []
    for i in range(cfg.n_image_layers):
        h, c = _block_forward(h, p, f"img.blk{i}.", cfg.n_heads, False)
        blocks.append(c)
    hf, cln = K.layernorm_forward(h, p["img.ln.g"], p["img.ln.b"])
    con, ccon = K.pooler_forward(p["pool_con.q"], hf, p, "pool_con.attn.", cfg.n_heads)
    cap, ccap = K.pooler_forward(p["pool_cap.q"], hf, p, "pool_cap.attn.", cfg.n_heads)
    u_raw, cproj = K.linear_forward(con[:, 0], p["img.proj"])
    return u_raw, cap, (cpe, blocks, cln, ccon, ccap, cproj)


def image_backward(du_raw, dcap, cache, p, cfg, grads):
    cpe, blocks, cln, ccon, ccap, cproj = cache
    dhf = 0.0
    if du_raw is not None:
        dcon0, grads["img.proj"], _ = K.linear_backward(du_raw, cproj)
        dq, dkv, g = K.pooler_backward(dcon0[:, None, :], ccon, p)
        grads.update(g)
        grads["pool_con.q"] = dq
        dhf = dhf + dkv
    if dcap is not None:
        dq, dkv, g = K.pooler_backward(dcap, ccap, p)
        grads.update(g)
        grads["pool_cap.q"] = dq
        dhf = dhf + dkv
    dh, grads["img.ln.g"], grads["img.ln.b"] = K.layernorm_backward(dhf, cln)
    for c in reversed(blocks):
        dh, _ = _block_backward(dh, c, p, grads)
    grads["img.pos"] = dh.sum(axis=0)
    _, grads["img.patch.w"], grads["img.patch.b"] = K.linear_backward(dh, cpe)


def _pad_tokens(seqs):
    lengths = np.array([len(s) for s in seqs])
    lmax = int(lengths.max())
    ids = np.full((len(seqs), lmax + 1), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
    return ids, lengths


def text_forward(p, cfg: CocaConfig, seqs, with_cls=True):
    """Encode token sequences; CLS (if any) sits at index ``len(seq)``."""
    ids, lengths = _pad_tokens(seqs)
    if not with_cls:
        ids = ids[:, :-1]
    n = ids.shape[1]
    if n > p["txt.pos"].shape[0]:
        raise InvalidArgumentError("caption longer than the positional table")
    x = p["txt.emb"][ids] + p["txt.pos"][:n]
    rows = np.arange(len(seqs))
    if with_cls:
        x[rows, lengths] = p["txt.cls"] + p["txt.pos"][lengths]
    blocks = []
    for i in range(cfg.n_text_layers):
        x, c = _block_forward(x, p, f"txt.blk{i}.", cfg.n_heads, True)
        blocks.append(c)
    hf, cln = K.layernorm_forward(x, p["txt.ln.g"], p["txt.ln.b"])
    v_raw = cproj = None
    if with_cls:
        v_raw, cproj = K.linear_forward(hf[rows, lengths], p["txt.proj"])
    return hf, v_raw, (ids, lengths, with_cls, blocks, cln, cproj)


def text_backward(dhf, dv_raw, cache, p, cfg, grads):
    ids, lengths, with_cls, blocks, cln, cproj = cache
    rows = np.arange(len(lengths))
    dhf = np.array(dhf, dtype=np.float64, copy=True) if dhf is not None else np.zeros(
        ids.shape + (cfg.d_model,))
    if dv_raw is not None:
        dcls_out, grads["txt.proj"], _ = K.linear_backward(dv_raw, cproj)
        dhf[rows, lengths] += dcls_out
    dx, grads["txt.ln.g"], grads["txt.ln.b"] = K.layernorm_backward(dhf, cln)
    for c in reversed(blocks):
        dx, _ = _block_backward(dx, c, p, grads)
    n = ids.shape[1]
    dpos = np.zeros_like(p["txt.pos"])
    dpos[:n] = dx.sum(axis=0)
    grads["txt.pos"] = dpos
    demb = np.zeros_like(p["txt.emb"])
    tok_mask = np.ones(ids.shape, dtype=bool)
    if with_cls:
        tok_mask[rows, lengths] = False
        grads["txt.cls"] = dx[rows, lengths].sum(axis=0)
    else:
        grads["txt.cls"] = np.zeros_like(p["txt.cls"])
    np.add.at(demb, ids[tok_mask], dx[tok_mask])
    grads["txt.emb"] = demb


def decoder_forward(p, cfg: CocaConfig, h_text, img_tokens):
    x = h_text
    blocks = []
    for i in range(cfg.n_decoder_layers):
        x, c = _block_forward(x, p, f"dec.blk{i}.", cfg.n_heads, True, kv=img_tokens)
        blocks.append(c)
    hf, cln = K.layernorm_forward(x, p["dec.ln.g"], p["dec.ln.b"])
    logits, chead = K.linear_forward(hf, p["dec.head.w"], p["dec.head.b"])
    return logits, (blocks, cln, chead)


def decoder_backward(dlogits, cache, p, grads):
    blocks, cln, chead = cache
    dhf, grads["dec.head.w"], grads["dec.head.b"] = K.linear_backward(dlogits, chead)
    dx, grads["dec.ln.g"], grads["dec.ln.b"] = K.layernorm_backward(dhf, cln)
    dkv = 0.0
    for c in reversed(blocks):
        dx, dk = _block_backward(dx, c, p, grads)
        dkv = dkv + dk
    return dx, dkv


def _normalize_forward(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / n, n


def _normalize_backward(dy, y, n):
    return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / n


# --- losses -----------------------------------------------------------------

def contrastive_loss(u, v, tau):
    """Symmetric image-text InfoNCE over a batch of paired unit embeddings.

    ``loss = -(1/2M) sum_i log softmax_row(tau U V^T)_ii
             -(1/2M) sum_j log softmax_col(tau U V^T)_jj``

    Returns ``(loss, {"u": dU, "v": dV, "tau": dtau})``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 2 or u.shape[0] < 1:
        raise InvalidArgumentError("u and v must be matching (M, d) arrays with M >= 1")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.isfinite(tau)):
        raise NumericalError("non-finite embeddings or temperature")
    m = u.shape[0]
    sim = u @ v.T
    logits = tau * sim
    lp_row = K.log_softmax(logits, axis=1)
    lp_col = K.log_softmax(logits, axis=0)
    diag = np.arange(m)
    loss = -(lp_row[diag, diag].sum() + lp_col[diag, diag].sum()) / (2 * m)
    eye = np.eye(m)
    dlogits = ((np.exp(lp_row) - eye) + (np.exp(lp_col) - eye)) / (2 * m)
    grads = {"u": tau * dlogits @ v, "v": tau * dlogits.T @ u, "tau": float(np.sum(dlogits * sim))}
    return float(loss), grads


def token_nll(logits, targets, mask):
    """Summed negative log-likelihood of ``targets`` under ``logits``.

    Returns ``(nll_sum, dlogits)`` with ``dlogits`` the gradient of the sum.
    """
    lp = K.log_softmax(logits, axis=-1)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    nll = -float(np.sum(picked * mask))
    d = np.exp(lp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
    return nll, d * mask[..., None]


def _check_tokens(seqs, vocab):
    for s in seqs:
        s = np.asarray(s)
        if s.size < 2 or s[0] != BOS or s[-1] != EOS:
            raise InvalidArgumentError("token sequences must start with BOS and end with EOS")
        if s.size - 2 > MAX_CAPTION_LEN:
            raise InvalidArgumentError(f"caption longer than {MAX_CAPTION_LEN} tokens")
        if np.any(s < 0) or np.any(s >= vocab):
            raise InvalidArgumentError("token id outside vocabulary")


def joint_loss(params, cfg: CocaConfig, images, seqs, caption_weight=1.0, contrastive_weight=1.0,
               need_grad=True):
    """Weighted contrastive + captioning objective and its gradient.

    ``images`` are preprocessed floats (M, S, S, 3); ``seqs`` are BOS...EOS
    token arrays. Returns ``(loss, parts, grads)``; the captioning term is the
    per-caption summed token NLL averaged over the batch.
    """
    if caption_weight < 0 or contrastive_weight < 0:
        raise InvalidArgumentError("loss weights must be non-negative")
    if caption_weight == 0 and contrastive_weight == 0:
        raise InvalidArgumentError("at least one loss weight must be positive")
    _check_tokens(seqs, cfg.vocab_size)
    p = params
    m = len(seqs)
    u_raw, cap_tokens, icache = image_forward(p, cfg, images)
    use_con = contrastive_weight > 0
    use_cap = caption_weight > 0
    h_text, v_raw, tcache = text_forward(p, cfg, seqs, with_cls=use_con)
    parts = {"contrastive": 0.0, "captioning": 0.0}
    grads = {k: np.zeros_like(val) for k, val in p.items()} if need_grad else None
    du_raw = dv_raw = dh_text = dcap = None
    if use_con:
        u, un = _normalize_forward(u_raw)
        v, vn = _normalize_forward(v_raw)
        tau = float(np.exp(p["log_tau"]))
        lc, gc = contrastive_loss(u, v, tau)
        parts["contrastive"] = lc
        if need_grad:
            du_raw = _normalize_backward(contrastive_weight * gc["u"], u, un)
            dv_raw = _normalize_backward(contrastive_weight * gc["v"], v, vn)
            grads["log_tau"] = np.array(contrastive_weight * gc["tau"] * tau)
    if use_cap:
        ids, lengths = tcache[0], tcache[1]
        steps = int(lengths.max()) - 1
        logits, dcache = decoder_forward(p, cfg, h_text[:, :steps], cap_tokens)
        targets = ids[:, 1:steps + 1]
        mask = (np.arange(steps)[None, :] < (lengths[:, None] - 1)).astype(np.float64)
        nll, dlogits = token_nll(logits, targets, mask)
        parts["captioning"] = nll / m
        if need_grad:
            dx, dcap = decoder_backward(dlogits * (caption_weight / m), dcache, p, grads)
            dh_text = np.zeros(h_text.shape)
            dh_text[:, :steps] = dx
    loss = contrastive_weight * parts["contrastive"] + caption_weight * parts["captioning"]
    if need_grad:
        text_backward(dh_text, dv_raw, tcache, p, cfg, grads)
        image_backward(du_raw, dcap, icache, p, cfg, grads)
    return loss, parts, grads


def captioning_loss(params, cfg, images, seqs, need_grad=True):
    loss, _, grads = joint_loss(params, cfg, images, seqs, 1.0, 0.0, need_grad)
    return loss, grads


def encode_images(params, cfg, images, batch_size=256) -> np.ndarray:
    x = preprocess_images(images)
    out = []
    for i in range(0, len(x), batch_size):
        u_raw, _, _ = image_forward(params, cfg, x[i:i + batch_size])
        out.append(_normalize_forward(u_raw)[0])
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


def encode_token_seqs(params, cfg, seqs, batch_size=256) -> np.ndarray:
    out = []
    for i in range(0, len(seqs), batch_size):
        _, v_raw, _ = text_forward(params, cfg, seqs[i:i + batch_size], with_cls=True)
        out.append(_normalize_forward(v_raw)[0])
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_steps: int = 50
    betas: tuple = (0.9, 0.999)
    caption_weight: float = 1.0
    contrastive_weight: float = 1.0
    max_steps: int | None = None


def train_toy(images, seqs, cfg: CocaConfig, train_cfg: TrainConfig, rng: SeededRng, params=None,
              callback=None):
    """Optimise the joint objective with AdamW + warmup/cosine schedule.

    ``images`` are uint8 or float tiles. Returns ``(params, loss_curve)``
    where ``loss_curve`` holds one dict per epoch. A callback receives
    ``(epoch, params)`` after every epoch and may return True to stop.
    """
    x_all = preprocess_images(images)
    n = len(seqs)
    if n < 1 or len(x_all) != n:
        raise InvalidArgumentError("need one caption per image and at least one pair")
    if params is None:
        params = init_params(cfg, rng.child(0))
    opt = AdamW(params, lr=train_cfg.lr, betas=tuple(train_cfg.betas),
                weight_decay=train_cfg.weight_decay, no_decay=no_decay_names(params))
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    shuffle_rng = rng.child(1)
    curve = []
    step = 0
    max_log_tau = math.log(cfg.max_logit_scale)
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        count = 0
        for s in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[s * bs:(s + 1) * bs]
            loss, parts, grads = joint_loss(params, cfg, x_all[idx], [seqs[i] for i in idx],
                                            train_cfg.caption_weight, train_cfg.contrastive_weight)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            lr = cosine_lr(step, total, train_cfg.lr, train_cfg.warmup_steps, train_cfg.min_lr)
            opt.step(params, grads, lr)
            params["log_tau"] = np.minimum(params["log_tau"], max_log_tau)
            sums += len(idx) * np.array([loss, parts["contrastive"], parts["captioning"]])
            count += len(idx)
            step += 1
        if count == 0:
            break
        sums /= count
        curve.append({"epoch": epoch, "loss": float(sums[0]), "contrastive": float(sums[1]),
                      "captioning": float(sums[2])})
        if callback is not None and callback(epoch, params):
            break
    return params, curve


# --- decoding ---------------------------------------------------------------

def sample_top_k(logits, k: int, rng: SeededRng) -> int:
    """Draw from the renormalised ``k`` most likely entries of ``logits``.

    Ties in rank go to the lower index; ``k=1`` is greedy argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= k <= logits.size:
        raise InvalidArgumentError(f"k must lie in [1, {logits.size}]")
    order = np.argsort(-logits, kind="stable")[:k]
    if k == 1:
        return int(order[0])
    probs = K._softmax(logits[order])
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(order[min(j, k - 1)])


def decode_topk(params, cfg, image, k: int = 50, max_len: int = 32, rng: SeededRng | None = None):
    """Autoregressively sample a caption for one image; returns token ids."""
    if not 1 <= k <= cfg.vocab_size:
        raise InvalidArgumentError(f"k must lie in [1, {cfg.vocab_size}]")
    rng = rng or SeededRng(0)
    x = preprocess_images(image)
    _, cap_tokens, _ = image_forward(params, cfg, x)
    seq = [BOS]
    for _ in range(max_len):
        h, _, _ = text_forward(params, cfg, [np.array(seq)], with_cls=False)
        logits, _ = decoder_forward(params, cfg, h, cap_tokens)
        tok = sample_top_k(logits[0, -1], k, rng)
        seq.append(tok)
        if tok == EOS:
            break
    return np.array(seq, dtype=np.int64)


# --- estimator --------------------------------------------------------------

class CocaModel(TransformerMixin, BaseEstimator):
    """Toy contrastive captioner with a scikit-learn style interface.

    ``fit(images, captions)`` trains the model; ``transform`` maps images to
    unit-norm embeddings; ``encode_text`` maps strings to the same space.
    """

    def __init__(self, d_model=64, n_heads=4, n_image_layers=2, n_text_layers=2, n_decoder_layers=2,
                 n_caption_queries=16, embed_dim=64, image_size=32, patch_size=8, epochs=30,
                 batch_size=64, lr=2e-3, weight_decay=0.05, warmup_steps=50, caption_weight=1.0,
                 contrastive_weight=1.0, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_image_layers = n_image_layers
        self.n_text_layers = n_text_layers
        self.n_decoder_layers = n_decoder_layers
        self.n_caption_queries = n_caption_queries
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.patch_size = patch_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.caption_weight = caption_weight
        self.contrastive_weight = contrastive_weight
        self.seed = seed

    def _make_config(self, vocab_size):
        return CocaConfig(vocab_size=vocab_size, image_size=self.image_size, patch_size=self.patch_size,
                          d_model=self.d_model, n_heads=self.n_heads, n_image_layers=self.n_image_layers,
                          n_text_layers=self.n_text_layers, n_decoder_layers=self.n_decoder_layers,
                          n_caption_queries=self.n_caption_queries, embed_dim=self.embed_dim)

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
                           caption_weight=self.caption_weight, contrastive_weight=self.contrastive_weight)

    def fit(self, X, y, vocab_texts=(), callback=None):
        """Train on images ``X`` (N, S, S, 3) and captions ``y`` (N strings).

        ``vocab_texts`` adds words (e.g. prompt templates) to the vocabulary.
        """
        captions = list(y)
        if len(captions) != len(X):
            raise InvalidArgumentError("X and y differ in length")
        self.tokenizer_ = Tokenizer.from_texts(list(captions) + list(vocab_texts))
        self.config_ = self._make_config(len(self.tokenizer_))
        seqs = [self.tokenizer_.encode(c) for c in captions]
        self.params_, self.loss_curve_ = train_toy(X, seqs, self.config_, self._train_config(),
                                                   SeededRng(self.seed), callback=callback)
        return self

    def transform(self, X):
        return self.encode_image(X)

    def encode_image(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return encode_images(self.params_, self.config_, X)

    def encode_text(self, texts) -> np.ndarray:
        check_is_fitted(self, "params_")
        return encode_token_seqs(self.params_, self.config_, [self.tokenizer_.encode(t) for t in texts])

    @property
    def logit_scale_(self) -> float:
        return float(np.exp(self.params_["log_tau"]))

    def generate(self, X, k=50, max_len=32, seed=0) -> list[str]:
        check_is_fitted(self, "params_")
        rng = SeededRng(seed)
        return [self.tokenizer_.decode(decode_topk(self.params_, self.config_, img, k, max_len, rng.child(i)))
                for i, img in enumerate(np.asarray(X))]

    def save(self, path):
        check_is_fitted(self, "params_")
        write_checkpoint(path, self.params_, {
            "kind": "coca", "estimator": self.get_params(), "model": asdict(self.config_),
            "vocab": self.tokenizer_.vocab, "loss_curve": self.loss_curve_})

    @classmethod
    def load(cls, path) -> "CocaModel":
        params, cfg = read_checkpoint(path)
        if cfg.get("kind") != "coca":
            raise InvalidArgumentError(f"{path} is not a captioner checkpoint")
        est = cls(**cfg["estimator"])
        est.params_ = params
        est.config_ = CocaConfig(**cfg["model"])
        est.tokenizer_ = Tokenizer(cfg["vocab"][len(SPECIALS):])
        est.loss_curve_ = cfg.get("loss_curve", [])
        return est


def finetune_captioning(model: CocaModel, train_images, train_captions, val_images, val_captions,
                        max_epochs=40, patience=10, lr=1e-3, batch_size=16, k=50, seed=0):
    """Caption fine-tuning with the contrastive weight set to zero.

    Keeps the checkpoint with the best validation ROUGE-1 and stops after
    ``patience`` epochs without improvement. Returns ``(model, history)``.
    """
    from .eval_stats import rouge1

    check_is_fitted(model, "params_")
    tok = model.tokenizer_
    seqs = [tok.encode(c) for c in train_captions]
    tc = TrainConfig(epochs=max_epochs, batch_size=batch_size, lr=lr, warmup_steps=10,
                     weight_decay=0.2, caption_weight=1.0, contrastive_weight=0.0)
    state = {"best": -1.0, "best_params": None, "since": 0, "history": []}

    def on_epoch(epoch, params):
        rng = SeededRng(seed).child(epoch)
        scores = []
        for i, (img, ref) in enumerate(zip(val_images, val_captions)):
            hyp = tok.decode(decode_topk(params, model.config_, img, k, 32, rng.child(i)))
            scores.append(rouge1(hyp, ref))
        score = float(np.mean(scores))
        state["history"].append({"epoch": epoch, "val_rouge1": score})
        if score > state["best"]:
            state["best"], state["since"] = score, 0
            state["best_params"] = {kk: v.copy() for kk, v in params.items()}
        else:
            state["since"] += 1
        return state["since"] >= patience

    params = {kk: v.copy() for kk, v in model.params_.items()}
    _, curve = train_toy(train_images, seqs, model.config_, tc, SeededRng(seed), params=params,
                         callback=on_epoch)
    model.params_ = state["best_params"] if state["best_params"] is not None else params
    for row, h in zip(curve, state["history"]):
        row.update(h)
    return model, curve
