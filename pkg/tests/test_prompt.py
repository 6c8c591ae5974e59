import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sar2opt.errors import ConfigError, VocabularyError
from sar2opt.prompt import (
    PROMPT_LENGTH,
    PromptEmbedder,
    PromptSpec,
    PromptVocabulary,
    build_prompt,
    cfg_drop,
    drop_tokens,
    embed_prompt,
    null_prompt,
    parse_prompt,
)
from sar2opt.synthdata import DEFAULT_CLASSES

NAMES = [c.name for c in DEFAULT_CLASSES]


def test_prompt_example():
    spec = build_prompt([0.9, 0.8, 0.6], tau=0.7, k=2, class_names=["forest", "water", "urban"])
    assert spec.text == "Electro-Optical Image of [forest, water]"
    assert spec.active_classes == (0, 1)


def test_fallback_prompt():
    spec = build_prompt([0.7, 0.2, 0.5], tau=0.7, k=2, class_names=["a", "b", "c"])
    assert spec.text == "Electro-Optical Image" and spec.active_classes == ()


def test_tie_break_lower_index():
    assert build_prompt([0.8, 0.8], tau=0.7, k=1).active_classes == (0,)


def test_top_k_applied_before_threshold():
    # the second-ranked class is below tau, so only one survives even though k=2
    assert build_prompt([0.75, 0.65, 0.2], tau=0.7, k=2).active_classes == (0,)


def test_bad_k_and_names():
    with pytest.raises(ConfigError):
        build_prompt([0.9], k=0)
    with pytest.raises(ConfigError):
        build_prompt([0.9, 0.1], class_names=["only"])


probs_st = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=len(NAMES))


@settings(max_examples=100, deadline=None)
@given(probs=probs_st, tau=st.floats(0, 0.99), k=st.integers(1, 4))
def test_selection_contract(probs, tau, k):
    spec = build_prompt(probs, tau, k, NAMES[: len(probs)])
    assert len(spec.active_classes) <= k
    assert all(probs[c] > tau for c in spec.active_classes)
    assert list(spec.probs) == sorted(spec.probs, reverse=True)
    assert parse_prompt(spec.text, NAMES[: len(probs)]) == spec.active_classes


@settings(max_examples=60, deadline=None)
@given(probs=probs_st, k=st.integers(1, 4), power=st.floats(0.2, 5))
def test_invariant_under_order_preserving_rescaling(probs, k, power):
    tau = 0.5
    p = np.asarray(probs)
    q = p**power  # monotone and keeps the cut at 0.5 ** power
    assert build_prompt(p, tau, k).active_classes == build_prompt(q, tau**power, k).active_classes


def test_parse_rejects_garbage():
    with pytest.raises(VocabularyError):
        parse_prompt("An image of stuff", NAMES)
    with pytest.raises(VocabularyError):
        parse_prompt("Electro-Optical Image of [lava]", NAMES)


def test_vocabulary_contract():
    vocab = PromptVocabulary(NAMES)
    a = build_prompt([0.9, 0.8, 0, 0, 0, 0], class_names=NAMES)
    assert vocab.token_ids(a) == vocab.token_ids(a)
    nulls = vocab.token_ids(null_prompt())
    for active in [(), (0,), (3, 1), (5, 2)]:
        ids = vocab.token_ids(PromptSpec(active, ""))
        assert len(ids) == PROMPT_LENGTH
        assert ids != nulls
    assert vocab.token_ids_from_names([NAMES[2]]) == vocab.token_ids(PromptSpec((2,), ""))
    with pytest.raises(VocabularyError):
        vocab.token_ids_from_names(["lava"])
    with pytest.raises(VocabularyError):
        vocab.token_ids(PromptSpec((99,), ""))


def test_embedding_shape_and_determinism():
    vocab = PromptVocabulary(NAMES)
    torch.manual_seed(0)
    emb = PromptEmbedder(vocab, 16)
    spec = build_prompt([0.9, 0, 0, 0, 0, 0.95], class_names=NAMES)
    y = embed_prompt(spec, emb)
    assert y.shape == (PROMPT_LENGTH, 16)
    assert torch.equal(y, embed_prompt(spec, emb))
    assert not torch.equal(y, embed_prompt(null_prompt(), emb))


def test_cfg_drop_extremes():
    spec = build_prompt([0.9], class_names=["a"])
    rng = np.random.default_rng(0)
    assert all(cfg_drop(spec, 0.0, rng) == spec for _ in range(200))
    assert all(cfg_drop(spec, 1.0, rng).is_null for _ in range(200))
    with pytest.raises(ConfigError):
        cfg_drop(spec, 1.5)


def test_cfg_drop_rate():
    spec = build_prompt([0.9], class_names=["a"])
    rng = np.random.default_rng(1)
    rate = np.mean([cfg_drop(spec, 0.5, rng).is_null for _ in range(10_000)])
    assert 0.48 <= rate <= 0.52


def test_drop_tokens_rate_and_rows():
    ids = torch.arange(8).repeat(10_000, 1) + 2
    out = drop_tokens(ids, 0.5, null_id=1, generator=torch.Generator().manual_seed(2))
    dropped = (out == 1).all(dim=1)
    assert 0.48 <= dropped.float().mean().item() <= 0.52
    assert torch.equal(out[~dropped], ids[~dropped])
