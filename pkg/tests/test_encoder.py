import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddr.encoder import (
    CLS_ID,
    SEP_ID,
    EncoderConfig,
    EncoderError,
    TokenSequence,
    collate,
    count_parameters,
    embed,
    encode,
    encode_many,
    init_backbone,
    similarity,
)
from ddr.rem import RemConfig

from conftest import TOY, random_seq

BERT = EncoderConfig(num_layers=12, hidden_dim=768, num_heads=12, ffn_dim=3072, vocab_size=30522, max_len=512)


# ---------------------------------------------------------------------- numpy oracle


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    from math import erf

    return 0.5 * x * (1 + np.vectorize(erf)(x / math.sqrt(2)))


def oracle_encode(backbone, ids, rem=None):
    """Plain numpy loop over heads for a single unpadded sequence."""
    cfg = backbone.config
    P = {k: v.detach().double().numpy() for k, v in backbone.params.items()}
    R = {} if rem is None else {k: v.detach().double().numpy() for k, v in rem.params.items()}
    n, d, h = len(ids), cfg.hidden_dim, cfg.num_heads
    dh = d // h
    x = P["dam.embed.tok"][ids] + P["dam.embed.pos"][:n]
    x = _ln(x, P["dam.embed.ln.g"], P["dam.embed.ln.b"], cfg.ln_eps)
    for i in range(cfg.num_layers):
        p = lambda k: P[f"dam.layer.{i}.{k}"]  # noqa: E731

        def proj(t, inp):
            out = inp @ p(f"attn.w{t}") + p(f"attn.b{t}")
            if rem is not None and t in rem.config.lora_targets:
                out = out + rem.config.lora_scale * (inp @ R[f"rem.layer.{i}.lora.{t}.a"] @ R[f"rem.layer.{i}.lora.{t}.b"])
            return out

        q, k, v = proj("q", x), proj("k", x), proj("v", x)
        heads = []
        for j in range(h):
            sl = slice(j * dh, (j + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            s = np.exp(s - s.max(-1, keepdims=True))
            heads.append((s / s.sum(-1, keepdims=True)) @ v[:, sl])
        att = proj("o", np.concatenate(heads, -1))
        x = _ln(x + att, p("attn_ln.g"), p("attn_ln.b"), cfg.ln_eps)
        f = _gelu(x @ p("ffn.w1") + p("ffn.b1")) @ p("ffn.w2") + p("ffn.b2")
        if rem is not None and rem.config.pa_bottleneck:
            f = f + rem.config.pa_scale * (np.maximum(x @ R[f"rem.layer.{i}.pa.down"], 0) @ R[f"rem.layer.{i}.pa.up"])
        x = _ln(x + f, p("ffn_ln.g"), p("ffn_ln.b"), cfg.ln_eps)
    return x.mean(0)


def test_forward_matches_numpy_oracle():
    cfg = EncoderConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=20, max_len=8)
    bb = init_backbone(cfg, seed=5)
    # Bigger weights than the default init so every sub-layer matters.
    gen = torch.Generator().manual_seed(0)
    for name in bb.params.names():
        bb.params[name] = bb.params[name] + 0.3 * torch.randn(bb.params[name].shape, generator=gen)
    ids = [CLS_ID, 7, 11, 12, 19, SEP_ID]
    got = encode(bb, TokenSequence(tuple(ids))).double().numpy()
    assert np.abs(got - oracle_encode(bb, ids)).max() < 1e-5


def test_forward_with_rem_matches_numpy_oracle():
    from conftest import perturbed_rem
    from ddr.rem import insert_rem

    bb = init_backbone(TOY, seed=1)
    rem = perturbed_rem(TOY, seed=2)
    ids = [CLS_ID, 9, 9, 14, SEP_ID]
    got = encode(insert_rem(bb, rem), TokenSequence(tuple(ids))).double().numpy()
    assert np.abs(got - oracle_encode(bb, ids, rem)).max() < 1e-5


# ---------------------------------------------------------------------- pooling


def test_single_token_pooling_is_its_hidden_state():
    from ddr.encoder import hidden_states

    bb = init_backbone(TOY, seed=0)
    ids, mask = collate([TokenSequence((7,))])
    assert torch.equal(encode(bb, TokenSequence((7,))), hidden_states(bb, ids, mask)[0, 0])


def test_padding_does_not_change_output():
    bb = init_backbone(TOY, seed=0)
    seq = TokenSequence((CLS_ID, 8, 9, SEP_ID))
    a = encode(bb, seq)
    b = encode(bb, seq.padded(TOY.max_len))
    assert torch.allclose(a, b, atol=1e-6, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_junk_under_padding_is_invisible_bitwise(seed):
    gen = torch.Generator().manual_seed(seed)
    bb = init_backbone(TOY, seed=seed % 7)
    n = int(torch.randint(1, TOY.max_len, (1,), generator=gen))
    real = torch.randint(0, TOY.vocab_size, (n,), generator=gen).tolist()
    pad = TOY.max_len - n
    mask = (1,) * n + (0,) * pad
    junk_a = torch.randint(0, TOY.vocab_size, (pad,), generator=gen).tolist()
    junk_b = list(reversed(junk_a))
    out_a = encode(bb, TokenSequence(tuple(real + junk_a), mask))
    out_b = encode(bb, TokenSequence(tuple(real + [0] * pad), mask))
    out_c = encode(bb, TokenSequence(tuple(real + junk_b), mask))
    assert torch.equal(out_a, out_b) and torch.equal(out_a, out_c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_encode_dim_and_finite(seed):
    gen = torch.Generator().manual_seed(seed)
    bb = init_backbone(TOY, seed=1)
    v = encode(bb, random_seq(gen, TOY))
    assert v.shape == (TOY.hidden_dim,) and torch.isfinite(v).all()


def test_specials_switch_changes_pooling():
    seq = TokenSequence((CLS_ID, 8, SEP_ID))
    with_specials = init_backbone(TOY, seed=0)
    no_specials = init_backbone(EncoderConfig(**{**TOY.to_dict(), "pool_specials": False}), seed=0)
    from ddr.encoder import hidden_states

    ids, mask = collate([seq])
    hid = hidden_states(no_specials, ids, mask)[0]
    assert torch.equal(encode(no_specials, seq), hid[1])
    assert torch.allclose(encode(with_specials, seq), hid.mean(0), atol=1e-6)


def test_encode_rejects_overlong():
    bb = init_backbone(TOY, seed=0)
    with pytest.raises(EncoderError):
        encode(bb, TokenSequence(tuple([5] * (TOY.max_len + 1))))


def test_encode_is_deterministic_and_batch_consistent():
    gen = torch.Generator().manual_seed(4)
    bb = init_backbone(TOY, seed=2)
    seqs = [random_seq(gen, TOY) for _ in range(7)]
    batch = encode_many(bb, seqs, batch_size=3)
    for i, s in enumerate(seqs):
        assert torch.allclose(batch[i], encode(bb, s), atol=1e-6)
    assert torch.equal(batch, encode_many(bb, seqs, batch_size=3))


def test_token_sequence_validation():
    with pytest.raises(EncoderError):
        TokenSequence((1, 2), (0, 0))
    with pytest.raises(EncoderError):
        TokenSequence((1, 2), (1,))


def test_init_is_seeded():
    assert init_backbone(TOY, seed=9).params.bitwise_equal(init_backbone(TOY, seed=9).params)
    assert not init_backbone(TOY, seed=9).params.bitwise_equal(init_backbone(TOY, seed=10).params)


def test_config_validation():
    with pytest.raises(EncoderError):
        EncoderConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(EncoderError):
        EncoderConfig(max_len=0)
    with pytest.raises(EncoderError):
        EncoderConfig(similarity_kind="l2")


def test_embed_rejects_empty_pool():
    cfg = EncoderConfig(**{**TOY.to_dict(), "pool_specials": False})
    ids, mask = collate([TokenSequence((CLS_ID, SEP_ID))])
    with pytest.raises(EncoderError):
        embed(init_backbone(cfg), ids, mask)


# ---------------------------------------------------------------------- similarity


def test_similarity_examples():
    assert similarity([1, 2], [3, 4], "inner_product") == 11
    assert similarity([1, 2], [3, 4], "dot") == 11
    assert similarity([1, 0], [0, 5], "cosine") == 0
    with pytest.raises(EncoderError):
        similarity([0, 0], [1, 1], "cosine")
    with pytest.raises(EncoderError):
        similarity([1, 2, 3], [1, 2], "inner_product")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6), st.data())
def test_cosine_bounds_and_self_similarity(u, data):
    if max(abs(x) for x in u) < 1e-3:
        return
    v = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(u), max_size=len(u)))
    assert similarity(u, u, "cosine") == pytest.approx(1.0, abs=1e-12)
    if max(abs(x) for x in v) >= 1e-3:
        assert -1 - 1e-12 <= similarity(u, v, "cosine") <= 1 + 1e-12


# ---------------------------------------------------------------------- parameter accounting


def test_bert_base_total():
    # Token 30522*768 + positions 512*768 + LN 1536 = 23,835,648; each layer 7,087,872.
    assert count_parameters(BERT).backbone_total == 23_835_648 + 12 * 7_087_872


@pytest.mark.parametrize(
    "rank,bottleneck,trainable,overhead",
    [(96, 0, 3.20, 0.0), (192, 0, 6.50, 0.0), (192, 192, 9.70, 3.20)],
)
def test_trainable_fractions_table(rank, bottleneck, trainable, overhead):
    counts = count_parameters(BERT, RemConfig.for_encoder(BERT, lora_rank=rank, pa_bottleneck=bottleneck))
    assert abs(100 * counts.trainable_fraction - trainable) <= 0.15
    assert abs(100 * counts.inference_overhead_fraction - overhead) <= 0.15


def test_low_rank_count_formula():
    counts = count_parameters(BERT, RemConfig.for_encoder(BERT, lora_rank=96, pa_bottleneck=0))
    assert counts.rem_trainable == 12 * 2 * 2 * 768 * 96
    assert counts.inference_extra == 0
