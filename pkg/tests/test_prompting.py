import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histovl.data_io import PromptSet, builtin_prompt_set
from histovl.exceptions import InvalidArgumentError
from histovl.numerics import SeededRng
from histovl.prompting import (
    ClassEmbeddingBank, build_ensemble_bank, build_single_prompt_bank, ensemble_class_embedding, sample_prompt_sets,
)
from histovl.zeroshot import classify_tile


class TableEncoder:
    """Looks prompts up in a fixed table; unknown strings get a hashed random vector."""

    def __init__(self, table=None, dim=6):
        self.table = dict(table or {})
        self.dim = dim

    def encode_text(self, texts):
        out = []
        for t in texts:
            if t not in self.table:
                self.table[t] = SeededRng(sum(ord(c) * (i + 1) for i, c in enumerate(t))).normal(size=self.dim)
            out.append(self.table[t])
        return np.array(out)


def test_single_prompt_unchanged():
    e = np.array([0.6, 0.8, 0.0])
    enc = TableEncoder({"a": e})
    np.testing.assert_allclose(ensemble_class_embedding(["a"], enc), e, atol=1e-15)


def test_duplicates_same_as_one():
    enc = TableEncoder(dim=5)
    np.testing.assert_allclose(ensemble_class_embedding(["x", "x"], enc), ensemble_class_embedding(["x"], enc),
                               atol=1e-15)


def test_orthogonal_pair():
    enc = TableEncoder({"a": np.array([1.0, 0, 0]), "b": np.array([0, 1.0, 0])})
    np.testing.assert_allclose(ensemble_class_embedding(["a", "b"], enc), np.array([1, 1, 0]) / np.sqrt(2),
                               atol=1e-15)


def test_callable_encoder_accepted():
    f = lambda texts: np.array([[3.0, 4.0]] * len(texts))
    np.testing.assert_allclose(ensemble_class_embedding(["p", "q"], f), [0.6, 0.8])


def test_empty_and_degenerate():
    enc = TableEncoder({"a": np.array([1.0, 0]), "b": np.array([-1.0, 0])})
    with pytest.raises(InvalidArgumentError):
        ensemble_class_embedding([], enc)
    with pytest.raises(InvalidArgumentError):
        ensemble_class_embedding(["a", "b"], enc)


@given(st.lists(st.sampled_from(list("abcdefgh")), min_size=1, max_size=8), st.integers(0, 1000))
def test_unit_norm_and_order_invariant(prompts, seed):
    enc = TableEncoder(dim=7)
    e = ensemble_class_embedding(prompts, enc)
    assert abs(np.linalg.norm(e) - 1) < 1e-6
    perm = np.random.default_rng(seed).permutation(len(prompts))
    np.testing.assert_allclose(ensemble_class_embedding([prompts[i] for i in perm], enc), e, atol=1e-12)


# --- banks --------------------------------------------------------------------------

def test_bank_rejects_non_unit():
    with pytest.raises(InvalidArgumentError):
        ClassEmbeddingBank(["A"], np.array([[2.0, 0.0]]))
    with pytest.raises(InvalidArgumentError):
        ClassEmbeddingBank(["A", "B"], np.array([[1.0, 0.0]]))


def test_ensemble_bank_keeps_class_order():
    ps = builtin_prompt_set("crc100k")
    bank = build_ensemble_bank(ps, TableEncoder(dim=8))
    assert bank.labels == ps.labels
    np.testing.assert_allclose(np.linalg.norm(bank.vectors, axis=1), 1.0, atol=1e-6)
    sub = bank.subset([ps.labels[2], ps.labels[0]])
    assert sub.labels == [ps.labels[2], ps.labels[0]]
    assert ClassEmbeddingBank.from_dict(bank.to_dict()).vectors.tobytes() == bank.vectors.tobytes()


@given(st.floats(0.01, 100.0), st.integers(0, 500))
def test_argmax_invariant_to_common_scale(c, seed):
    r = SeededRng(seed)
    v = r.normal(size=(5, 4))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    u = r.normal(size=4)
    bank = ClassEmbeddingBank(list("ABCDE"), v)
    scaled = (v * c) @ u
    assert classify_tile(u, bank)[0] == int(np.argmax(scaled))


# --- sampling -----------------------------------------------------------------------

def test_sample_fifty_sets_deterministic():
    ps = builtin_prompt_set("crc100k")
    a = sample_prompt_sets(ps, 50, SeededRng(9))
    assert len(a) == 50 and all(len(s) == len(ps.classes) for s in a)
    assert a == sample_prompt_sets(ps, 50, SeededRng(9))
    assert a != sample_prompt_sets(ps, 50, SeededRng(10))


def test_pool_of_one_gives_identical_sets():
    ps = PromptSet(["a CLASSNAME"], [("A", ["x"]), ("B", ["y"])])
    sets = sample_prompt_sets(ps, 20, SeededRng(0))
    assert all(s == ["a x", "a y"] for s in sets)


def test_sampling_is_uniform_over_cross_product():
    ps = PromptSet(["one CLASSNAME", "two CLASSNAME"], [("A", ["p", "q"])])
    sets = sample_prompt_sets(ps, 10_000, SeededRng(4))
    pool = ["one p", "one q", "two p", "two q"]
    freq = np.array([sum(s[0] == p for s in sets) for p in pool]) / 10_000
    sd = np.sqrt(0.25 * 0.75 / 10_000)
    assert np.all(np.abs(freq - 0.25) < 3 * sd)


def test_sampling_errors():
    ps = PromptSet(["a CLASSNAME"], [("A", ["x"])])
    with pytest.raises(InvalidArgumentError):
        sample_prompt_sets(ps, 0, SeededRng(0))
    with pytest.raises(InvalidArgumentError):
        sample_prompt_sets(ps, 3)


def test_single_prompt_bank():
    ps = PromptSet(["a CLASSNAME"], [("A", ["x"]), ("B", ["y"])])
    bank = build_single_prompt_bank(ps, ["a x", "a y"], TableEncoder(dim=3))
    assert bank.prompts == ["a x", "a y"]
    np.testing.assert_allclose(np.linalg.norm(bank.vectors, axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        build_single_prompt_bank(ps, ["a x"], TableEncoder(dim=3))
