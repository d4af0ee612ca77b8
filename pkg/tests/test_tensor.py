import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lmdm import tensor as T
from lmdm.errors import ContractError, DimensionError
from lmdm.gradcheck import check
from lmdm.verify import _op_cases


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradient_matches_finite_differences(name):
    for seed in range(3):
        fn, inputs = _op_cases(np.random.default_rng(seed))[name]
        assert check(fn, inputs) < 1e-3


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)


@settings(max_examples=30, deadline=None)
@given(hnp.array_shapes(min_dims=1, max_dims=3, max_side=4), st.integers(0, 3), st.integers(0, 99))
def test_suffix_broadcast_gradients_reduce_to_input_shapes(shape, cut, seed):
    # bilinear, so central differences carry no truncation error
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape[min(cut, len(shape)):])
    w = rng.standard_normal(shape)
    err = check(lambda u, v: T.sum(T.mul(T.add(T.mul(u, v), v), w)), [a, b])
    assert err < 1e-3


def test_non_suffix_broadcast_is_rejected():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((2, 1)))


def test_reused_tensor_accumulates_gradient():
    x = T.parameter(np.array([1.5, -2.0], np.float32))
    with T.Tape() as tape:
        y = T.sum(T.add(T.mul(x, x), x))
    g = tape.backward(y)[x]
    np.testing.assert_allclose(g, 2 * x.data + 1, rtol=1e-6)


def test_no_record_builds_no_nodes():
    x = T.parameter(np.ones(3, np.float32))
    with T.Tape() as tape:
        with T.no_record():
            T.sum(T.square(x))
    assert len(tape) == 0


def test_matmul_mac_count():
    with T.count_macs() as c:
        T.matmul(np.ones((2, 3, 4), np.float32), np.ones((4, 5), np.float32))
    assert c.total == 2 * 3 * 5 * 4


def test_sum_accumulates_in_double():
    x = np.full(100_000, 0.1, np.float32)
    assert abs(T.sum(x).item() - 100_000 * np.float64(np.float32(0.1))) < 1e-2


def test_softmax_rows_sum_to_one_with_masking():
    x = np.random.default_rng(1).standard_normal((4, 5))
    mask = np.tril(np.ones((4, 5), bool))
    p = T.softmax(T.masked_fill(x, mask), -1).data
    np.testing.assert_allclose(p.sum(-1), 1, rtol=1e-6)
    assert np.all(p[~mask] == 0)


def test_rope_preserves_norm_and_relative_angles():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((1, 1, 1, 8))
    k = rng.standard_normal((1, 1, 1, 8))
    dots = []
    for shift in (0, 5):
        qr = T.rope(q, np.array([3 + shift])).data
        kr = T.rope(k, np.array([1 + shift])).data
        dots.append(float((qr * kr).sum()))
        np.testing.assert_allclose(np.linalg.norm(qr), np.linalg.norm(q), rtol=1e-5)
    assert dots[0] == pytest.approx(dots[1], rel=1e-4)


def test_broadcast_mismatch_raises():
    with pytest.raises((DimensionError, ValueError)):
        T.add(np.ones((2, 3)), np.ones((4, 3)))


def test_precision_context_switches_dtype():
    with T.precision(np.float64):
        assert T.tensor([1.0]).data.dtype == np.float64
    assert T.tensor([1.0]).data.dtype == np.float32


def test_matmul_identity_and_gradient():
    rng = np.random.default_rng(1)
    a = T.parameter(rng.standard_normal((3, 4)))
    b = rng.standard_normal((4, 2))
    np.testing.assert_array_equal(T.matmul(a, np.eye(4)).data, a.data)
    with T.Tape() as tape:
        y = T.sum(T.matmul(a, b))
    np.testing.assert_allclose(tape.backward(y)[a], np.ones((3, 2)) @ b.T, rtol=1e-6)


def test_trivial_ops_are_identities():
    x = np.random.default_rng(2).standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.add(x, np.zeros_like(x)).data, x)
    np.testing.assert_array_equal(T.scale(x, 1.0).data, x)


def test_softmax_edge_rows():
    np.testing.assert_allclose(T.softmax(np.zeros(3)).data, np.full(3, 1 / 3), rtol=1e-6)
    out = T.softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_layer_norm_constant_row_and_zero_gain():
    x = np.full((2, 5), 3.0)
    np.testing.assert_allclose(T.layer_norm(x).data, 0.0, atol=1e-6)
    y = np.random.default_rng(3).standard_normal((2, 5))
    bias = np.arange(5.0)
    out = T.layer_norm(y, gain=np.zeros(5), bias=bias).data
    np.testing.assert_allclose(out, np.broadcast_to(bias, (2, 5)))


def test_backward_of_simple_sums():
    x = T.parameter(np.array([0.5, -1.0, 2.0]))
    with T.Tape() as tape:
        y = T.sum(x)
    np.testing.assert_array_equal(tape.backward(y)[x], np.ones(3))
    with T.Tape() as tape:
        y = T.scale(T.sum(T.square(x)), 0.5)
    np.testing.assert_allclose(tape.backward(y)[x], x.data)


def test_detached_tensor_gets_no_gradient():
    x = T.parameter(np.ones(3))
    with T.Tape() as tape:
        d = T.detach(T.scale(x, 2.0))
        y = T.sum(T.mul(x, d))
    grads = tape.backward(y)
    assert d not in grads
    np.testing.assert_allclose(grads[x], d.data)


def test_second_backward_is_rejected():
    x = T.parameter(np.ones(2))
    with T.Tape() as tape:
        y = T.sum(x)
    tape.backward(y)
    with pytest.raises(ContractError):
        tape.backward(y)
