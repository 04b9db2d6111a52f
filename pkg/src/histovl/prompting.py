"""Class text embeddings from prompt sets: ensembling and single-prompt sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import PLACEHOLDER, PromptSet, expand_prompts
from .exceptions import InvalidArgumentError
from .validation import check_matrix, check_positive_int

NORM_TOL = 1e-6


def _encode(text_encoder, prompts) -> np.ndarray:
    fn = getattr(text_encoder, "encode_text", text_encoder)
    return check_matrix(fn(list(prompts)), "text embeddings")


def ensemble_class_embedding(prompts, text_encoder) -> np.ndarray:
    """Mean of the prompt embeddings, renormalised to unit length.

    ``text_encoder`` is either a callable mapping a list of strings to an
    (n, d) array or an object with ``encode_text``.
    """
    prompts = list(prompts)
    if not prompts:
        raise InvalidArgumentError("need at least one prompt")
    return mean_direction(_encode(text_encoder, prompts))


def mean_direction(embeddings) -> np.ndarray:
    e = check_matrix(embeddings, "embeddings")
    m = e.mean(axis=0)
    n = np.linalg.norm(m)
    if not n > 0:
        raise InvalidArgumentError("prompt embeddings average to the zero vector")
    return m / n


@dataclass
class ClassEmbeddingBank:
    """Unit-norm class embeddings in task order (rows of ``vectors``)."""
    labels: list
    vectors: np.ndarray
    prompts: list = field(default_factory=list)  # sampled prompt per class, empty when ensembled

    def __post_init__(self):
        self.vectors = check_matrix(self.vectors, "class embeddings")
        if len(self.labels) != len(self.vectors):
            raise InvalidArgumentError("one embedding per class label required")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise InvalidArgumentError("class embeddings must be unit-norm")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, labels) -> "ClassEmbeddingBank":
        idx = [self.labels.index(lbl) for lbl in labels]
        prompts = [self.prompts[i] for i in idx] if self.prompts else []
        return ClassEmbeddingBank([self.labels[i] for i in idx], self.vectors[idx], prompts)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "vectors": self.vectors.tolist(), "prompts": list(self.prompts)}

    @classmethod
    def from_dict(cls, d) -> "ClassEmbeddingBank":
        return cls(list(d["labels"]), np.asarray(d["vectors"], dtype=np.float64), list(d.get("prompts", [])))


def build_ensemble_bank(prompt_set: PromptSet, text_encoder) -> ClassEmbeddingBank:
    """One ensembled embedding per class over every template x class-name prompt."""
    vecs = [ensemble_class_embedding(expand_prompts(prompt_set, lbl), text_encoder) for lbl in prompt_set.labels]
    return ClassEmbeddingBank(prompt_set.labels, np.stack(vecs))


def sample_prompt_sets(prompt_set: PromptSet, n_sets: int = 50, rng=None) -> list[list[str]]:
    """``n_sets`` draws of one prompt per class.

    Each draw picks a (template, class name) pair uniformly from the
    cross-product, independently per class and per set.
    """
    n_sets = check_positive_int(n_sets, "n_sets")
    if rng is None:
        raise InvalidArgumentError("sample_prompt_sets needs an rng")
    n_t = len(prompt_set.templates)
    out = []
    for _ in range(n_sets):
        chosen = []
        for _, names in prompt_set.classes:
            j = int(rng.integers(0, n_t * len(names)))
            chosen.append(prompt_set.templates[j // len(names)].replace(PLACEHOLDER, names[j % len(names)]))
        out.append(chosen)
    return out


def build_single_prompt_bank(prompt_set: PromptSet, prompts, text_encoder) -> ClassEmbeddingBank:
    """Bank from one sampled prompt per class (as returned by ``sample_prompt_sets``)."""
    if len(prompts) != len(prompt_set.classes):
        raise InvalidArgumentError("one prompt per class required")
    e = _encode(text_encoder, prompts)
    n = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(n == 0):
        raise InvalidArgumentError("zero text embedding")
    return ClassEmbeddingBank(prompt_set.labels, e / n, list(prompts))
