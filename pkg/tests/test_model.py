import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qttt_lab.attention import AttentionBlockState
from qttt_lab.model import (
    OTHER,
    QUERY,
    DecodeSession,
    ModelConfig,
    SamplerConfig,
    Span,
    decode,
    frozen_forward,
    full_forward_logits,
    grad_wq_span,
    init_params,
    prefill_and_cache,
    rope_rotate,
    span_forward_frozen_kv,
)
from qttt_lab.model.transformer import forward_full
from qttt_lab.numeric import Rng
from qttt_lab.qttt import query_gradient_closed_form

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=8, mlp_ratio=2, max_T=64, init_std=0.3)


def _tokens(seed, T, hi=256):
    rng = Rng(seed)
    return [rng.integers(0, hi) for _ in range(T)]


@pytest.fixture(scope="module")
def tiny():
    return init_params(TINY, 0)


# -- config / params ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs", [dict(d_model=10, n_heads=4), dict(mlp_ratio=0), dict(vocab=1), dict(d_model=6, n_heads=2)]
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_partition_flags_exactly_the_query_projections(tiny):
    part = tiny.partition
    assert set(part) == set(tiny.tensors)
    assert [n for n, p in part.items() if p == QUERY] == ["layers.0.wq", "layers.1.wq"]
    assert all(p == OTHER for n, p in part.items() if not n.endswith(".wq"))


def test_init_is_seeded():
    a, b, c = init_params(TINY, 3), init_params(TINY, 3), init_params(TINY, 4)
    assert all(torch.equal(a[n], b[n]) for n in a.tensors)
    assert not torch.equal(a["embed"], c["embed"])


# -- rotary ----------------------------------------------------------------------------


def test_rope_identity_at_position_zero_and_when_disabled():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)
    assert torch.allclose(rope_rotate(x, 0), x, atol=0)
    assert torch.equal(rope_rotate(x, 17, enabled=False), x)


def test_rope_rejects_odd_dim():
    with pytest.raises(ValueError):
        rope_rotate([1.0, 2.0, 3.0], 1)


@given(st.integers(0, 2**32), st.integers(0, 5000))
@settings(max_examples=100)
def test_rope_preserves_norm(seed, pos):
    x = torch.from_numpy(Rng(seed).normal_array(8))
    assert abs(float(rope_rotate(x, pos).norm()) - float(x.norm())) <= 1e-12


@given(st.integers(0, 2**32), st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 500))
@settings(max_examples=100)
def test_rope_inner_product_depends_on_offset_only(seed, p1, p2, shift):
    gen = Rng(seed).numpy()
    q, k = torch.from_numpy(gen.normal(size=8)), torch.from_numpy(gen.normal(size=8))
    a = float(rope_rotate(q, p1) @ rope_rotate(k, p2))
    b = float(rope_rotate(q, p1 + shift) @ rope_rotate(k, p2 + shift))
    assert a == pytest.approx(b, abs=1e-9)


# -- prefill ----------------------------------------------------------------------------


def test_prefill_single_token(tiny):
    cache = prefill_and_cache(tiny, [65])
    assert cache.T == 1 and cache.n_layers == 2
    assert cache.keys[0].shape == (2, 1, 4)


def test_prefill_deterministic_fingerprint(tiny):
    toks = _tokens(1, 12)
    assert prefill_and_cache(tiny, toks).fingerprint == prefill_and_cache(tiny, toks).fingerprint


def test_prefill_errors(tiny):
    with pytest.raises(ValueError):
        prefill_and_cache(tiny, _tokens(0, 65))
    with pytest.raises(ValueError):
        prefill_and_cache(tiny, [1, 2, 999])


def test_first_layer_keys_match_standalone_recompute(tiny):
    toks = _tokens(2, 10)
    cache = prefill_and_cache(tiny, toks)
    c = tiny.config
    for j in range(10):
        h = tiny["embed"][toks[j]].numpy()
        a = (h - h.mean()) / math.sqrt(h.var() + c.ln_eps) * tiny["layers.0.ln1"].numpy()
        k = tiny["layers.0.wk"].numpy() @ a
        for head in range(c.n_heads):
            blk = k[head * c.d_head : (head + 1) * c.d_head]
            ref = rope_rotate(blk, j).numpy()
            assert np.max(np.abs(cache.keys[0][head, j].numpy() - ref)) <= 1e-10


@pytest.mark.parametrize("rope", [True, False])
def test_attention_rows_are_causal_distributions(tiny, rope):
    params = tiny.with_config(rope_enabled=rope)
    toks = torch.tensor(_tokens(3, 14))
    _, _, _, attn = forward_full(params, toks, return_attn=True)
    for w in attn:
        assert torch.allclose(w.sum(-1), torch.ones(w.shape[:-1], dtype=w.dtype), atol=1e-10)
        assert torch.all(w.triu(1) == 0)


# -- span loss ----------------------------------------------------------------------------


def test_span_loss_matches_full_forward_when_params_unchanged(tiny):
    toks = _tokens(4, 16)
    cache = prefill_and_cache(tiny, toks)
    span = Span(5, 6)
    loss, _ = span_forward_frozen_kv(tiny, cache, toks, span)
    logits = full_forward_logits(tiny, toks)
    pos = span.query_positions()
    ref = torch.nn.functional.cross_entropy(logits[pos], torch.tensor(toks)[pos + 1], reduction="sum")
    assert abs(float(loss) - float(ref)) <= 1e-9


def test_single_position_span_is_one_log_prob(tiny):
    toks = _tokens(5, 10)
    cache = prefill_and_cache(tiny, toks)
    loss, logits = span_forward_frozen_kv(tiny, cache, toks, Span(3, 1))
    expected = -torch.log_softmax(logits[0], -1)[toks[3]]
    assert float(loss) == pytest.approx(float(expected), abs=1e-12)


def test_span_bounds_and_length_mismatch(tiny):
    toks = _tokens(6, 10)
    cache = prefill_and_cache(tiny, toks)
    with pytest.raises(ValueError):
        span_forward_frozen_kv(tiny, cache, toks, Span(7, 4))
    with pytest.raises(ValueError):
        span_forward_frozen_kv(tiny, cache, toks[:-1], Span(1, 2))
    with pytest.raises(ValueError):
        Span(0, 3)
    with pytest.raises(ValueError):
        Span(1, 0)


def test_perturbing_wq_changes_loss_but_not_cache(tiny):
    toks = _tokens(7, 16)
    cache = prefill_and_cache(tiny, toks)
    before, _ = span_forward_frozen_kv(tiny, cache, toks, Span(2, 8))
    p2 = tiny.clone()
    p2.tensors["layers.1.wq"][0, 0] += 0.5
    after, _ = span_forward_frozen_kv(p2, cache, toks, Span(2, 8))
    assert float(before) != float(after)
    assert cache.current_fingerprint() == cache.fingerprint


def test_frozen_forward_rejects_bad_positions(tiny):
    toks = _tokens(8, 6)
    cache = prefill_and_cache(tiny, toks)
    with pytest.raises(ValueError):
        frozen_forward(tiny, cache, toks, [6])
    with pytest.raises(ValueError):
        frozen_forward(tiny, cache, toks, [])


# -- W_Q gradient ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_wq_gradient_matches_central_differences(seed):
    params = init_params(TINY, seed)
    toks = _tokens(100 + seed, 16)
    cache = prefill_and_cache(params, toks)
    span = Span(1 + seed, 4)
    _, grads = grad_wq_span(params, cache, toks, span)
    assert set(grads) == set(params.query_names())
    h = 1e-5
    for name, g in grads.items():
        for idx in np.ndindex(*g.shape):
            p = params.clone()
            p.tensors[name][idx] += h
            up = float(span_forward_frozen_kv(p, cache, toks, span)[0])
            p.tensors[name][idx] -= 2 * h
            down = float(span_forward_frozen_kv(p, cache, toks, span)[0])
            fd = (up - down) / (2 * h)
            an = float(g[idx])
            assert abs(an - fd) / max(abs(an), abs(fd), 1e-12) <= 1e-5 or abs(an - fd) <= 1e-10


def test_wq_gradient_does_not_touch_other_params(tiny):
    toks = _tokens(9, 16)
    cache = prefill_and_cache(tiny, toks)
    snapshot = {n: tiny.tensor_bytes(n) for n in tiny.tensors}
    grad_wq_span(tiny, cache, toks, Span(3, 5))
    assert all(tiny.tensor_bytes(n) == snapshot[n] for n in tiny.tensors)
    assert all(t.grad is None for t in tiny.tensors.values())


def test_model_attention_gradient_matches_closed_form():
    # one layer, one head, no rotation: the loss -log alpha[needle] of one
    # query row, differentiated by autograd through wq, equals the closed
    # form query gradient times the normalized input
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, mlp_ratio=1, rope_enabled=False, max_T=32, init_std=0.5)
    params = init_params(cfg, 1)
    toks = _tokens(11, 12)
    cache = prefill_and_cache(params, toks)
    p, needle = 9, 4
    wq = params["layers.0.wq"].detach().clone().requires_grad_(True)
    _, attn = frozen_forward(params, cache, toks, [p], return_attn=True, weights={"layers.0.wq": wq})
    loss = -torch.log(attn[0][0, 0, needle])
    (g_auto,) = torch.autograd.grad(loss, wq)

    h = params["embed"][toks[p]]
    a = torch.nn.functional.layer_norm(h, (8,), weight=params["layers.0.ln1"], eps=cfg.ln_eps)
    q = (params["layers.0.wq"] @ a).numpy()
    K = cache.keys[0][0, : p + 1].numpy()
    state = AttentionBlockState.build(q, K, np.zeros((p + 1, 1)), needle)
    g_closed = np.outer(query_gradient_closed_form(state), a.numpy())
    err = np.linalg.norm(g_auto.numpy() - g_closed) / np.linalg.norm(g_closed)
    assert err <= 1e-6


# -- decoding ---------------------------------------------------------------------------------


def test_decode_zero_tokens(tiny):
    toks = _tokens(12, 8)
    cache = prefill_and_cache(tiny, toks)
    assert decode(tiny, cache, toks, 8, 0) == []


def test_greedy_decode_is_deterministic_and_leaves_cache(tiny):
    toks = _tokens(13, 8)
    cache = prefill_and_cache(tiny, toks)
    a = decode(tiny, cache, toks, 8, 10)
    b = decode(tiny, cache, toks, 8, 10)
    assert a == b and len(a) == 10
    assert cache.current_fingerprint() == cache.fingerprint and cache.T == 8


def test_first_greedy_step_is_argmax_of_full_forward(tiny):
    toks = _tokens(14, 9)
    cache = prefill_and_cache(tiny, toks)
    assert decode(tiny, cache, toks, 9, 1)[0] == int(torch.argmax(full_forward_logits(tiny, toks)[-1]))


def test_decoded_sequence_matches_full_forward_recompute(tiny):
    toks = _tokens(15, 6)
    cache = prefill_and_cache(tiny, toks)
    out = decode(tiny, cache, toks, 6, 5)
    seq = list(toks)
    for t in out:
        assert t == int(torch.argmax(full_forward_logits(tiny, seq)[-1]))
        seq.append(t)


def test_decode_extends_attended_length(tiny):
    toks = _tokens(16, 7)
    cache = prefill_and_cache(tiny, toks)
    s = DecodeSession(tiny, cache, toks, reserve=2)
    s.generate(5, feed_last=True)
    assert s.length == 12 and s.cache().T == 12


def test_decode_past_max_t(tiny):
    toks = _tokens(17, 60)
    cache = prefill_and_cache(tiny, toks)
    with pytest.raises(ValueError):
        decode(tiny, cache, toks, 60, 10)


def test_sampled_decode_reproducible_with_seed(tiny):
    toks = _tokens(18, 8)
    cache = prefill_and_cache(tiny, toks)
    cfg = SamplerConfig(temperature=1.0, top_k=20, seed=5)
    assert decode(tiny, cache, toks, 8, 12, cfg) == decode(tiny, cache, toks, 8, 12, cfg)


def test_no_rope_decode_path(tiny):
    params = tiny.with_config(rope_enabled=False)
    toks = _tokens(19, 8)
    cache = prefill_and_cache(params, toks)
    out = decode(params, cache, toks, 8, 4)
    assert out[0] == int(torch.argmax(full_forward_logits(params, toks)[-1]))


# -- checkpoints ---------------------------------------------------------------------------------

from qttt_lab.model import TrainConfig, train_base_model  # noqa: E402
from qttt_lab.model.checkpoint import CheckpointError, dumps, load, loads, save  # noqa: E402


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny):
    p = tiny.clone()
    p.metadata["note"] = "x"
    save(p, tmp_path / "m.ckpt")
    back = load(tmp_path / "m.ckpt")
    assert back.config == p.config and back.metadata == p.metadata
    assert all(back.tensor_bytes(n) == p.tensor_bytes(n) for n in p.tensors)
    assert dumps(back) == (tmp_path / "m.ckpt").read_bytes()


@pytest.mark.parametrize("cut", [4, 40, -8])
def test_corrupt_checkpoints_are_rejected(tiny, cut):
    blob = dumps(tiny)
    with pytest.raises(CheckpointError):
        loads(blob[:cut])


def test_bad_magic_rejected(tiny):
    with pytest.raises(CheckpointError):
        loads(b"NOTACKPT" + dumps(tiny)[8:])


# -- base training -----------------------------------------------------------------------------

MICRO = ModelConfig(n_layers=1, n_heads=2, d_model=16, mlp_ratio=2, max_T=64)
MICRO_TRAIN = TrainConfig(seq_len=24, batch_size=4, lr=1e-2, warmup_steps=10)


def _corpus():
    return [list(b"abcabcabcabc" * 3), list(b"xyzxyzxyz" * 4), list(b"0123456789" * 3)]


def test_zero_steps_returns_initialization():
    p = train_base_model(MICRO, _corpus(), 0, MICRO_TRAIN)
    ref = init_params(MICRO, MICRO_TRAIN.seed)
    assert all(p.tensor_bytes(n) == ref.tensor_bytes(n) for n in ref.tensors)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train_base_model(MICRO, [], 5, MICRO_TRAIN)


def test_training_is_reproducible():
    a = train_base_model(MICRO, _corpus(), 15, MICRO_TRAIN)
    b = train_base_model(MICRO, _corpus(), 15, MICRO_TRAIN)
    assert dumps(a) == dumps(b)


def test_training_lowers_loss():
    p = train_base_model(MICRO, _corpus(), 500, MICRO_TRAIN)
    losses = p.metadata["losses"]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
