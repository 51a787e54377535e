"""Model tests: tokenizer round-trips, causality, LoRA no-op equivalence,
constrained yes/no scoring, prompt templates, and loss gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sella.minilm import (
    ITEM_TOK,
    MiniLM,
    ModelConfig,
    RESERVED_TOKENS,
    Tokenizer,
    USER_TOK,
    WARM_TOK,
    bce_term,
    bce_terms_to_loss,
    build_sft_prompt,
    prompt_corpus,
    render_sft_prompt,
    sft_loss,
    yes_no_graph,
    yes_no_probability,
)
from sella.tensor import Graph, ShapeError, grad_check


def tiny_model(vocab_size=24, **kw):
    cfg = dict(vocab_size=vocab_size, d_model=16, n_layers=2, n_heads=2,
               max_len=32, lora_r=2, lora_alpha=4.0, init_seed=0)
    cfg.update(kw)
    return MiniLM(ModelConfig(**cfg))


# ---------------------------------------------------------------------------
# tokenizer


def test_build_vocab_first_occurrence_order():
    tok = Tokenizer.build(["a b", "b c"])
    n = len(RESERVED_TOKENS)
    assert tok.vocab["a"] == n
    assert tok.vocab["b"] == n + 1
    assert tok.vocab["c"] == n + 2


def test_encode_decode_identity_in_vocab():
    tok = Tokenizer.build(["alpha beta gamma"])
    text = "beta alpha gamma"
    assert tok.decode(tok.encode(text)) == text


def test_reserved_tokens_atomic_and_stable(tmp_path):
    tok = Tokenizer.build(["a"])
    ids = tok.encode(f"{USER_TOK} a {WARM_TOK}")
    assert ids == [tok.user_id, tok.vocab["a"], tok.warm_id]
    tok.save(str(tmp_path / "vocab.json"))
    back = Tokenizer.load(str(tmp_path / "vocab.json"))
    assert back.vocab == tok.vocab
    assert (back.pad_id, back.yes_id, back.no_id) == (0, 2, 3)


def test_unknown_words_map_to_unk():
    tok = Tokenizer.build(["a"])
    assert tok.encode("zzz a") == [tok.unk_id, tok.vocab["a"]]


def test_punctuation_split_off_words():
    tok = Tokenizer.build(["Heat (1995)"])
    assert tok.decode(tok.encode("Heat (1995)")) == "Heat ( 1995 )"


@given(st.lists(st.sampled_from(["red", "blue", "dog", "cat", "run"]),
                min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_roundtrip_property_on_vocab_words(words):
    tok = Tokenizer.build(["red blue dog cat run"])
    text = " ".join(words)
    assert tok.decode(tok.encode(text)) == text


# ---------------------------------------------------------------------------
# forward contract


def test_causality_row_t_ignores_future_tokens():
    model = tiny_model()
    ids = [7, 8, 9, 10, 11]
    base = model.forward(model.embed(ids))
    for swap in (12, 13):
        ids2 = ids[:3] + [swap, ids[4]]
        out = model.forward(model.embed(ids2))
        assert np.array_equal(out[:3], base[:3])
        assert not np.array_equal(out[3], base[3])


def test_lora_disabled_equals_zero_B_enabled():
    model = tiny_model()
    emb = model.embed([4, 5, 6])
    assert np.array_equal(model.forward(emb, lora_enabled=True),
                          model.forward(emb, lora_enabled=False))


def test_lora_nonzero_B_changes_logits_only_when_enabled():
    model = tiny_model()
    name = next(iter(model.lora.pairs))
    model.lora.pairs[name]["B"][:] = 0.5
    emb = model.embed([4, 5, 6])
    on = model.forward(emb, lora_enabled=True)
    off = model.forward(emb, lora_enabled=False)
    assert not np.array_equal(on, off)


def test_forward_deterministic_across_constructions():
    a = tiny_model().forward(tiny_model().embed([3, 4, 5]))
    b = tiny_model().forward(tiny_model().embed([3, 4, 5]))
    assert np.array_equal(a, b)


def test_forward_overlength_reports_lengths():
    model = tiny_model(max_len=4)
    with pytest.raises(ShapeError, match="5.*max_len 4"):
        model.forward(model.embed([1, 2, 3, 4, 5]))


def test_dmodel_head_divisibility_enforced():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)


def test_last_row_only_matches_full_forward():
    model = tiny_model()
    emb = model.embed([4, 5, 6, 7])
    full = model.forward(emb)
    last = model.forward(emb, last_row_only=True)
    # different GEMM shapes may differ in the last bits; not bit-exact
    np.testing.assert_allclose(last[0], full[-1], atol=1e-12)


def test_hidden_last_shape_and_determinism():
    model = tiny_model()
    emb = model.embed([4, 5, 6])
    h1 = model.hidden_last(emb)
    h2 = model.hidden_last(emb)
    assert h1.shape == (16,)
    assert np.array_equal(h1, h2)


def test_attention_maps_are_causal_row_stochastic():
    model = tiny_model()
    maps = model.attention_maps(model.embed([4, 5, 6, 7]))
    assert len(maps) == 2
    for m in maps:
        assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)
        assert np.array_equal(np.triu(m, k=1), np.zeros_like(m))


def test_model_save_load_bit_identical(tmp_path):
    model = tiny_model()
    model.lora.pairs[next(iter(model.lora.pairs))]["B"][:] = 0.25
    model.save(str(tmp_path / "ck"))
    back = MiniLM.load(str(tmp_path / "ck"))
    for name, arr in model.params.items():
        assert np.array_equal(back.params[name], arr)
    for name, arr in model.lora.flat_params().items():
        assert np.array_equal(back.lora.flat_params()[name], arr)
    emb = model.embed([4, 5])
    assert np.array_equal(back.forward(emb), model.forward(emb))


# ---------------------------------------------------------------------------
# yes/no scoring


def test_yes_no_equal_logits_is_half():
    row = np.zeros(10)
    assert yes_no_probability(row) == 0.5


def test_yes_no_ln3_gap_is_three_quarters():
    row = np.zeros(10)
    row[2] = math.log(3.0)
    assert yes_no_probability(row) == pytest.approx(0.75, abs=1e-15)


def test_yes_no_huge_gap_no_overflow():
    row = np.zeros(10)
    row[2] = 1000.0
    p = yes_no_probability(row)
    assert abs(p - 1.0) <= 1e-12
    row[2], row[3] = 0.0, 1000.0
    assert yes_no_probability(row) <= 1e-12


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-1e6, 1e6))
@settings(max_examples=60, deadline=None)
def test_yes_no_shift_invariance(l_yes, l_no, shift):
    row = np.zeros(6)
    row[2], row[3] = l_yes, l_no
    p = yes_no_probability(row)
    assert 0.0 <= p <= 1.0
    # row + shift rounds each logit, perturbing the gap by up to
    # eps * (|shift| + |logit|) per entry; |dp/dgap| <= 1/4
    bound = max(1e-12, np.finfo(float).eps * (abs(shift) + 500.0))
    assert yes_no_probability(row + shift) == pytest.approx(p, abs=bound)


def test_yes_no_graph_matches_float_path():
    model = tiny_model()
    emb = model.embed([4, 5, 6])
    g = Graph()
    leaves = model.leaves(g)
    eff = model.effective_weights(g, leaves, True)
    logits = model.forward_graph(g, leaves, eff, g.leaf(emb),
                                 last_row_only=True)
    probs = yes_no_graph(g, logits, model.config.vocab_size)
    direct = yes_no_probability(model.forward(emb)[-1])
    assert probs.out.numpy()[0, 0] == pytest.approx(direct, abs=1e-14)


# ---------------------------------------------------------------------------
# sft loss


def test_sft_loss_half_is_ln2():
    assert sft_loss(0.5, 1) == pytest.approx(math.log(2.0), abs=1e-15)
    assert sft_loss(0.5, 0) == pytest.approx(math.log(2.0), abs=1e-15)


def test_sft_loss_exact_prediction_clamped():
    assert sft_loss(1.0, 1) == pytest.approx(0.0, abs=1e-11)
    assert sft_loss(0.0, 0) == pytest.approx(0.0, abs=1e-11)
    assert sft_loss(0.0, 1) == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_sft_loss_symmetric_batch_mean_is_ln2():
    losses = [sft_loss(0.5, 1), sft_loss(0.5, 0)]
    assert np.mean(losses) == pytest.approx(math.log(2.0), abs=1e-15)


def test_graph_bce_matches_float_formula():
    model = tiny_model()
    g = Graph()
    leaves = model.leaves(g)
    eff = model.effective_weights(g, leaves, True)
    terms = []
    direct = []
    for ids, label in [([4, 5, 6], 1), ([7, 8], 0), ([9, 10, 11, 12], 1)]:
        emb = g.embedding_lookup(leaves["tok_emb"], tuple(ids))
        logits = model.forward_graph(g, leaves, eff, emb, last_row_only=True)
        probs = yes_no_graph(g, logits, model.config.vocab_size)
        terms.append(bce_term(g, probs, label))
        direct.append(sft_loss(
            yes_no_probability(model.forward(model.embed(ids))[-1]), label))
    loss = bce_terms_to_loss(g, terms)
    assert loss.out.item() == pytest.approx(np.mean(direct), abs=1e-9)


def test_stage1_loss_gradient_passes_grad_check():
    # full-model finite-difference check on a 2-layer configuration
    model = tiny_model()
    name = next(n for n in model.lora.pairs if n.endswith("ff.w1"))
    g = Graph()
    leaves = model.leaves(g, trainable={f"lora.{name}.A", f"lora.{name}.B"})
    # give B structure so its gradient path is active
    rng = np.random.default_rng(0)
    model.lora.pairs[name]["B"][:] = rng.normal(scale=0.05,
                                                size=(64, 2))
    g2 = Graph()
    leaves = model.leaves(g2, trainable={f"lora.{name}.A", f"lora.{name}.B"})
    eff = model.effective_weights(g2, leaves, True)
    emb = g2.embedding_lookup(leaves["tok_emb"], (4, 5, 6, 7))
    logits = model.forward_graph(g2, leaves, eff, emb, last_row_only=True)
    probs = yes_no_graph(g2, logits, model.config.vocab_size)
    loss = bce_terms_to_loss(g2, [bce_term(g2, probs, 1)])
    for pname in (f"lora.{name}.A", f"lora.{name}.B"):
        assert grad_check(g2, loss, leaves[pname], 1e-5) <= 1e-3


# ---------------------------------------------------------------------------
# prompts


def test_prompt_empty_history_renders_none_twice():
    text = render_sft_prompt([], "film0001 bright fast", k=5)
    assert text.count("none") == 2


def test_prompt_deterministic_token_ids():
    tok = Tokenizer.build(prompt_corpus(["film0001 bright", "film0002 dark"]))
    hist = [("film0002 dark", 0)]
    a = build_sft_prompt(tok, hist, "film0001 bright", k=3)
    b = build_sft_prompt(tok, hist, "film0001 bright", k=3)
    assert a == b
    assert tok.unk_id not in a


def test_prompt_history_truncated_to_k_most_recent():
    hist = [(f"film{i:04d} x", i % 2) for i in range(8)]
    text = render_sft_prompt(hist, "target", k=3)
    for i in range(5):
        assert f"film{i:04d}" not in text
    for i in range(5, 8):
        assert f"film{i:04d}" in text


def test_prompt_fusion_flags_insert_placeholders():
    plain = render_sft_prompt([], "t", k=1)
    assert USER_TOK not in plain and ITEM_TOK not in plain
    fused = render_sft_prompt([], "t", k=1, use_ui=True, use_warm=True)
    assert fused.count(USER_TOK) == 1
    assert fused.count(ITEM_TOK) == 1
    assert fused.count(WARM_TOK) == 1
    warm_only_off = render_sft_prompt([], "t", k=1, use_ui=True)
    assert WARM_TOK not in warm_only_off
