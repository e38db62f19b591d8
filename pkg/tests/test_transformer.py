import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgprefix.autodiff import ParamStore, Tensor, count_parameters
from kgprefix.exceptions import ConfigError, DimensionError, LengthError
from kgprefix.transformer import (AttentionKind, ModelConfig, PrefixInjection, attend_with_prefix, attention_head,
                                  base_param_count, base_param_shapes, causal_mask, forward_teacher_forced)

from conftest import random_weights, tiny_config

K = AttentionKind


def full_injections(cfg, rho, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return {(kind, l): PrefixInjection(Tensor(rng.normal(0, scale, (rho, cfg.d_model))),
                                       Tensor(rng.normal(0, scale, (rho, cfg.d_model))))
            for kind in cfg.kinds for l in range(cfg.n_layers)}


def empty_injections(cfg):
    z = np.zeros((0, cfg.d_model))
    return {(kind, l): PrefixInjection(Tensor(z), Tensor(z)) for kind in cfg.kinds for l in range(cfg.n_layers)}


# --- config -----------------------------------------------------------------

def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(architecture="rnn")
    assert ModelConfig(architecture="decoder_only").kinds == (K.D_S,)
    assert ModelConfig().kinds == (K.E_S, K.D_C, K.D_S)


def test_weights_are_registered_under_lm_prefix():
    cfg = tiny_config()
    names = base_param_shapes(cfg)
    assert all(n.startswith("lm.") for n in names)
    store = random_weights(cfg)
    assert count_parameters(store) == base_param_count(cfg)


def test_count_parameters_simple_cases():
    store = ParamStore()
    assert count_parameters(store) == 0
    store.add("x", np.zeros((3, 4)), trainable=True)
    assert count_parameters(store, trainable_only=True) == 12


# --- single-head attention --------------------------------------------------

def test_single_key_returns_value_row():
    rng = np.random.default_rng(0)
    wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
    v = rng.normal(size=(1, 4))
    for q in (rng.normal(size=(3, 4)), 10 * rng.normal(size=(3, 4))):
        out = attention_head(q, rng.normal(size=(1, 4)), v, wq, wk, wv).data
        np.testing.assert_allclose(out, np.repeat(v @ wv, 3, axis=0), atol=1e-12)


def test_uniform_keys_average_values():
    rng = np.random.default_rng(1)
    eye = np.eye(4)
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 4))
    out = attention_head(rng.normal(size=(2, 4)), k, v, eye, eye, eye).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)


def test_causal_mask_blocks_future_inputs():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4))
    w = [rng.normal(size=(4, 4)) for _ in range(3)]
    base = attention_head(x, x, x, *w, mask=causal_mask(5)).data
    y = x.copy()
    y[3:] += 1.0
    moved = attention_head(y, y, y, *w, mask=causal_mask(5)).data
    np.testing.assert_array_equal(base[:3], moved[:3])
    assert not np.allclose(base[3:], moved[3:])


def test_empty_prefix_is_bitwise_identical():
    rng = np.random.default_rng(3)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    w = [rng.normal(size=(4, 4)) for _ in range(3)]
    z = Tensor(np.zeros((0, 4)))
    a = attention_head(q, kv, kv, *w).data
    b = attend_with_prefix(q, kv, kv, PrefixInjection(z, z), *w).data
    np.testing.assert_array_equal(a, b)


def test_duplicated_keys_halve_attention_weights():
    rng = np.random.default_rng(4)
    eye = np.eye(4)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    # a prefix equal to the projected keys/values doubles every logit's multiplicity:
    # weights halve but the output (a weighted average) is unchanged
    inj = PrefixInjection(Tensor(k), Tensor(v))
    np.testing.assert_allclose(attend_with_prefix(q, k, v, inj, eye, eye, eye).data,
                               attention_head(q, k, v, eye, eye, eye).data, atol=1e-12)
    s = q @ k.T / 2.0
    w = np.exp(s - s.max(1, keepdims=True))
    single = w / w.sum(1, keepdims=True)
    doubled = np.concatenate([w, w], 1) / (2 * w.sum(1, keepdims=True))
    np.testing.assert_allclose(doubled[:, :3], single / 2, atol=1e-15)


def test_dominant_prefix_key_takes_over():
    rng = np.random.default_rng(5)
    eye = np.eye(4)
    q = np.ones((2, 4))
    k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pv = rng.normal(size=(1, 4))
    inj = PrefixInjection(Tensor(np.full((1, 4), 100.0)), Tensor(pv))
    out = attend_with_prefix(q, k, v, inj, eye, eye, eye).data
    np.testing.assert_allclose(out, np.tile(pv, (2, 1)), atol=1e-9)


def test_prefix_is_visible_under_causal_mask():
    rng = np.random.default_rng(6)
    eye = np.eye(4)
    x = rng.normal(size=(4, 4))
    pk, pv = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    base = attend_with_prefix(x, x, x, PrefixInjection(Tensor(pk), Tensor(pv)), eye, eye, eye, causal_mask(4)).data
    moved = attend_with_prefix(x, x, x, PrefixInjection(Tensor(pk), Tensor(pv + 1.0)), eye, eye, eye,
                               causal_mask(4)).data
    assert np.all(np.abs(base - moved).sum(axis=1) > 1e-6)  # the first query too


def test_mismatched_prefix_lengths_raise():
    with pytest.raises(DimensionError):
        PrefixInjection(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))


# --- full model -------------------------------------------------------------

@pytest.mark.parametrize("arch", ["encoder_decoder", "decoder_only"])
def test_zero_prefix_equivalence_on_100_inputs(arch):
    cfg = tiny_config(architecture=arch)
    w = random_weights(cfg, 1)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        src = rng.integers(4, cfg.vocab_size, size=rng.integers(1, 8)).tolist()
        tgt = rng.integers(4, cfg.vocab_size, size=rng.integers(1, 8)).tolist()
        a = forward_teacher_forced(cfg, w, None, src, tgt).data
        b = forward_teacher_forced(cfg, w, empty_injections(cfg), src, tgt).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(4, 12), min_size=1, max_size=6), st.lists(st.integers(4, 12), min_size=2, max_size=6),
       st.data())
def test_decoder_is_causal(src, tgt, data):
    cfg = tiny_config()
    w = random_weights(cfg, 2)
    inj = full_injections(cfg, 3, seed=1)
    t = data.draw(st.integers(0, len(tgt) - 2))
    changed = list(tgt)
    changed[t + 1] = 4 if tgt[t + 1] != 4 else 5
    a = forward_teacher_forced(cfg, w, inj, src, tgt).data
    b = forward_teacher_forced(cfg, w, inj, src, changed).data
    # the input at position p is the gold token p-1, so logits up to t+1 see only tokens <= t
    np.testing.assert_array_equal(a[: t + 2], b[: t + 2])


@pytest.mark.parametrize("kind", [K.E_S, K.D_C, K.D_S])
def test_every_position_sees_every_prefix_kind(kind):
    cfg = tiny_config()
    w = random_weights(cfg, 3)
    inj = full_injections(cfg, 2, seed=2)
    src, tgt = [5, 6, 7], [8, 9, 10, 11]
    base = forward_teacher_forced(cfg, w, inj, src, tgt).data
    moved = dict(inj)
    p = inj[(kind, 0)]
    moved[(kind, 0)] = PrefixInjection(p.keys, Tensor(p.values.data + 0.5))
    other = forward_teacher_forced(cfg, w, moved, src, tgt).data
    assert np.all(np.abs(base - other).max(axis=1) > 1e-9)


def test_decoder_only_prefix_visibility_and_shape():
    cfg = tiny_config(architecture="decoder_only")
    w = random_weights(cfg, 4)
    inj = full_injections(cfg, 2, seed=3)
    out = forward_teacher_forced(cfg, w, inj, [5, 6], [7, 8, 9])
    assert out.shape == (3, cfg.vocab_size)
    moved = {k: PrefixInjection(v.keys, Tensor(v.values.data * 2)) for k, v in inj.items()}
    assert np.all(np.abs(out.data - forward_teacher_forced(cfg, w, moved, [5, 6], [7, 8, 9]).data).max(1) > 1e-9)


def test_logits_are_deterministic_and_shaped():
    cfg = tiny_config()
    w = random_weights(cfg, 5)
    inj = full_injections(cfg, 2)
    a = forward_teacher_forced(cfg, w, inj, [4, 5, 6], [7, 8]).data
    b = forward_teacher_forced(cfg, w, inj, [4, 5, 6], [7, 8]).data
    assert a.shape == (2, cfg.vocab_size)
    np.testing.assert_array_equal(a, b)


def test_overlong_sequences_raise_length_error():
    cfg = tiny_config(max_seq_len=8)
    w = random_weights(cfg)
    with pytest.raises(LengthError):
        forward_teacher_forced(cfg, w, None, list(range(4, 13)), [5])
    with pytest.raises(LengthError):  # fits alone, not with a 4-row prefix
        forward_teacher_forced(cfg, w, full_injections(cfg, 4), [4, 5, 6, 7, 8], [5])


def test_out_of_vocabulary_token_raises():
    cfg = tiny_config()
    with pytest.raises(IndexError):
        forward_teacher_forced(cfg, random_weights(cfg), None, [cfg.vocab_size], [4])
