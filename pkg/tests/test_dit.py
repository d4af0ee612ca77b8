import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdm import tensor as T
from lmdm.dit import (AttentionMaskSpec, ConditionInput, DiT, MaskFamily, ModelConfig,
                      attention, banded_block_mask, build_mask)
from lmdm.errors import ConfigError, ContractError, DimensionError
from lmdm.verify import mask_predicate, measure_block_gradient, measure_context_invariance


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(list(MaskFamily)), st.integers(1, 6), st.integers(0, 4))
def test_mask_matches_entrywise_rule(family, o, blocks):
    s = o * blocks
    m = build_mask(AttentionMaskSpec(family, s, o))
    for r in range(s + o):
        for c in range(s + o):
            assert m[r, c] == mask_predicate(family, s, o, r, c)


def test_mask_structure():
    m = build_mask(AttentionMaskSpec("encdec", 4, 2))
    assert not m[:4, 4:].any() and m[4:].all() and m[:4, :4].all()
    bc = build_mask(AttentionMaskSpec("blockcausal", 4, 2))
    assert bc[3, 1] and not bc[1, 3]
    with pytest.raises(ConfigError):
        build_mask(AttentionMaskSpec("blockcausal", 5, 2))


def test_banded_mask_window():
    m = banded_block_mask(3, 2, 1)
    blk = np.arange(8) // 2
    assert m[7, 5] and not m[7, 3]
    assert np.array_equal(m, (blk[:, None] - blk[None] >= 0) & (blk[:, None] - blk[None] <= 1))


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=30, heads=4, head_dim=8)
    with pytest.raises(ConfigError):
        ModelConfig(context_frames=10, target_frames=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)


def test_context_activations_ignore_level_and_target():
    assert measure_context_invariance(range(3)) == 0


def test_context_rows_depend_on_clean_frames(tiny_model, tiny_cfg, rng):
    s = tiny_cfg.context_frames
    x = rng.standard_normal((1, 3, tiny_cfg.total_frames)).astype(np.float32)
    ctx = rng.standard_normal((1, 3, s)).astype(np.float32)
    with T.no_record():
        _, h1 = tiny_model.forward_full(x, ctx, 0.5, return_hidden=True)
        _, h2 = tiny_model.forward_full(x, ctx + 1, 0.5, return_hidden=True)
    assert not np.allclose(h1[-1].data[:, :s], h2[-1].data[:, :s])


def test_unrouted_context_sees_noise(tiny_model, tiny_cfg, rng):
    s = tiny_cfg.context_frames
    ctx = rng.standard_normal((1, 3, s)).astype(np.float32)
    x1 = rng.standard_normal((1, 3, tiny_cfg.total_frames)).astype(np.float32)
    with T.no_record():
        a = tiny_model.input_project(x1, ctx, route=False).data
        b = tiny_model.input_project(x1 + 1, ctx, route=False).data
    assert not np.allclose(a[:, :s], b[:, :s])


def test_decode_matches_full_pass(tiny_model, tiny_cfg, rng):
    s = tiny_cfg.context_frames
    ctx = rng.standard_normal((2, 3, s)).astype(np.float32)
    tgt = rng.standard_normal((2, 3, tiny_cfg.target_frames)).astype(np.float32)
    cond = ConditionInput(global_vec=np.eye(3, dtype=np.float32)[[0, 2]])
    cache = tiny_model.new_cache()
    with T.no_record():
        tiny_model.encode_context(ctx, cond, cache)
        dec = tiny_model.forward_decode(tgt, 0.4, cond, cache).data
        full = tiny_model.forward_full(np.concatenate([ctx, tgt], 2), ctx, 0.4, cond).data
    np.testing.assert_allclose(dec, full[:, :, s:], atol=1e-5)


def test_decode_without_context_raises(tiny_model, tiny_cfg):
    with pytest.raises(ContractError):
        tiny_model.forward_decode(np.zeros((1, 3, 2), np.float32), 0.5, None, tiny_model.new_cache())


def test_shape_errors(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model.forward_full(np.zeros((1, 3, 5), np.float32), np.zeros((1, 3, 4), np.float32), 0.5)
    with pytest.raises(DimensionError):
        tiny_model.forward_full(np.zeros((1, 2, 6), np.float32), np.zeros((1, 2, 4), np.float32), 0.5)


def test_cache_overflow_raises(tiny_model, tiny_cfg):
    cache = tiny_model.new_cache()
    with T.no_record():
        tiny_model.encode_context(np.zeros((1, 3, 4), np.float32), None, cache)
        with pytest.raises(ContractError):
            tiny_model.encode_context(np.zeros((1, 3, 2), np.float32), None, cache)
        tiny_model.encode_context(np.zeros((1, 3, 2), np.float32), None, cache, evict_oldest=True)
    assert len(cache) == 4


def test_end_to_end_block_gradient():
    assert measure_block_gradient(0) < 1e-3


def test_null_condition_differs_from_conditioned(tiny_model, tiny_cfg, rng):
    x = rng.standard_normal((1, 3, tiny_cfg.total_frames)).astype(np.float32)
    ctx = x[:, :, :4]
    with T.no_record():
        a = tiny_model.forward_full(x, ctx, 0.5, ConditionInput(np.eye(3, dtype=np.float32)[[1]])).data
        b = tiny_model.forward_full(x, ctx, 0.5, ConditionInput()).data
    assert not np.allclose(a, b)


def test_mask_enumerations():
    assert build_mask(AttentionMaskSpec("bidirectional"), 3).all()
    ed = build_mask(AttentionMaskSpec("encdec", 2, 2))
    np.testing.assert_array_equal(ed, [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]])
    bc = build_mask(AttentionMaskSpec("blockcausal", 4, 2))
    expected = np.zeros((6, 6), bool)
    expected[0:2, 0:2] = True
    expected[2:4, 0:4] = True
    expected[4:6, :] = True
    np.testing.assert_array_equal(bc, expected)


def test_routing_with_identity_blocks():
    cfg = ModelConfig(channels=4, hidden=4, layers=1, heads=1, head_dim=4,
                      context_frames=2, target_frames=2, cond_dim=2)
    model = DiT.init(cfg)
    model.params["init.weight"] = T.parameter(np.vstack([np.eye(4), np.eye(4)]).astype(np.float32))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    ctx = rng.standard_normal((1, 4, 2)).astype(np.float32)
    h = model.input_project(x, ctx).data[0]
    np.testing.assert_array_equal(h[2:], x[0, :, 2:].T)
    np.testing.assert_array_equal(h[:2], ctx[0].T)
    h0 = model.input_project(x, np.zeros_like(ctx)).data[0]
    np.testing.assert_array_equal(h0[:2], 0.0)


def test_attention_degenerate_masks():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((1, 1, 4, 3))
    q = np.zeros((1, 1, 4, 3))
    k = rng.standard_normal((1, 1, 4, 3))
    out = attention(q, k, v, np.ones((4, 4), bool)).data
    np.testing.assert_allclose(out[0, 0], np.broadcast_to(v[0, 0].mean(axis=0), (4, 3)))
    out = attention(rng.standard_normal((1, 1, 4, 3)), k, v, np.eye(4, dtype=bool)).data
    np.testing.assert_allclose(out, v)


def test_encdec_context_rows_ignore_target_values():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((3, 1, 2, 4, 4))
    mask = build_mask(AttentionMaskSpec("encdec", 2, 2))
    base = attention(q, k, v, mask).data
    v2 = v.copy()
    v2[..., 2:, :] += 5.0
    moved = attention(q, k, v2, mask).data
    np.testing.assert_array_equal(moved[..., :2, :], base[..., :2, :])
    assert not np.allclose(moved[..., 2:, :], base[..., 2:, :])


def test_rotary_attention_is_shift_invariant():
    rng = np.random.default_rng(3)
    q, k, v = rng.standard_normal((3, 1, 2, 6, 8))
    pos = np.arange(6)
    a = attention(q, k, v, q_positions=pos, k_positions=pos).data
    b = attention(q, k, v, q_positions=pos + 37, k_positions=pos + 37).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_decode_without_context_is_a_bidirectional_pass(rng):
    cfg = ModelConfig(channels=3, hidden=16, layers=2, heads=2, head_dim=8,
                      context_frames=0, target_frames=4, cond_dim=3)
    model = DiT.init(cfg, seed=1)
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    with T.no_record():
        full = model.forward_full(x, np.zeros((2, 3, 0), np.float32), 0.4,
                                  mask_spec=AttentionMaskSpec("bidirectional")).data
        cache = model.new_cache()
        dec = model.forward_decode(x, 0.4, None, cache).data
        again = model.forward_decode(x, 0.4, None, cache).data
    np.testing.assert_allclose(dec, full, atol=1e-5)
    np.testing.assert_array_equal(dec, again)


def test_cache_lengths_after_encoding(tiny_model, tiny_cfg, rng):
    s, o = tiny_cfg.context_frames, tiny_cfg.target_frames
    ctx = rng.standard_normal((1, 3, s)).astype(np.float32)
    with T.no_record():
        cache = tiny_model.new_cache()
        tiny_model.encode_context(ctx, None, cache)
        assert len(cache) == s
        cache = tiny_model.new_cache()
        for b in range(s // o):
            tiny_model.encode_context(ctx[:, :, b * o:(b + 1) * o], None, cache)
        assert len(cache) == s
