from .gradcheck import directional_check, finite_diff_check
from .kernels import (
    AttentionalPoolerConfig,
    attentional_pool,
    log_softmax,
    softmax,
)
from .optim import AdamW, cosine_lr
from .rng import SeededRng

__all__ = [
    "AdamW",
    "AttentionalPoolerConfig",
    "SeededRng",
    "attentional_pool",
    "cosine_lr",
    "directional_check",
    "finite_diff_check",
    "log_softmax",
    "softmax",
]
