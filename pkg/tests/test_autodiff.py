import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgprefix import autodiff as ad
from kgprefix.autodiff import ParamStore, Tape, Tensor, check_gradients, finite_difference_check
from kgprefix.exceptions import DimensionError, EmptyLossError, FrozenParameterError, NumericError

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
# the matmul gradient is a row sum of the other operand; positive entries
# keep it away from zero, where the 1e-8 relative-error floor dominates
positive = st.floats(0.25, 3)


def matrices(rows=st.integers(1, 4), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


# --- frozen oracles ---------------------------------------------------------

def test_gelu_reference_values():
    assert float(ad.gelu(np.array(1.0)).data) == pytest.approx(0.8411919906082768, abs=1e-15)
    assert float(ad.gelu(np.array(-0.5)).data) == pytest.approx(-0.15428599017485606, abs=1e-15)


def test_cross_entropy_reference_value():
    loss = ad.cross_entropy(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), [2, 1])
    expected = 0.5 * ((math.log(math.e + math.e**2 + math.e**3) - 3.0) + math.log(3.0))
    assert float(loss.data) == pytest.approx(expected, abs=1e-15)
    assert float(loss.data) == pytest.approx(0.7531091265562452, abs=1e-15)


def test_layer_norm_reference_value():
    out = ad.layer_norm(np.array([[1.0, 2.0, 4.0]]), np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out, [[-1.0690415314502977, -0.26726038286257453, 1.3363019143128718]], atol=1e-12)


def test_matmul_gradient_by_hand():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    with Tape() as tape:
        y = (a @ b).sum()
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_array_equal(ga, [[3.0, 4.0]])
    np.testing.assert_array_equal(gb, [[1.0], [2.0]])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = (x * x + x * 3.0).sum()
    (g,) = tape.gradient(y, [x])
    assert g[0] == pytest.approx(7.0)


# --- properties -------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(matrices())
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(x, axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(matrices(), st.floats(-50, 50))
def test_softmax_is_shift_invariant(x, c):
    np.testing.assert_allclose(ad.softmax(x + c).data, ad.softmax(x).data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.data())
def test_tanh_softmax_composite_gradient(m, n, data):
    x = data.draw(arrays(np.float64, (m, n), elements=st.floats(-2, 2)))
    w = np.tile(np.arange(n, dtype=float) ** 2, (m, 1))  # strictly increasing weights per row
    err = finite_difference_check(lambda t: (ad.softmax(ad.tanh(t), axis=-1) * Tensor(w)).sum(), x)
    assert err <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_matmul_gradient_matches_finite_differences(m, k, n, data):
    a = data.draw(arrays(np.float64, (m, k), elements=positive))
    b = data.draw(arrays(np.float64, (k, n), elements=positive))
    errs = check_gradients(lambda d: (d["a"] @ d["b"]).sum(), {"a": a, "b": b})
    assert max(errs.values()) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(matrices(rows=st.integers(2, 4), cols=st.integers(2, 5)))
def test_layer_norm_output_is_standardized(x):
    x = x + np.arange(x.shape[1])  # keep the variance away from zero
    y = ad.layer_norm(x, np.ones(x.shape[1]), np.zeros(x.shape[1])).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.lists(matrices(rows=st.just(2), cols=st.integers(1, 3)), min_size=1, max_size=3))
def test_concat_splits_gradient_back(parts):
    tensors = [Tensor(p, requires_grad=True) for p in parts]
    with Tape() as tape:
        y = (ad.concat(tensors, axis=1) * 2.0).sum()
    for g, p in zip(tape.gradient(y, tensors), parts):
        np.testing.assert_array_equal(g, np.full(p.shape, 2.0))


# --- errors -----------------------------------------------------------------

def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_incompatible_broadcast():
    with pytest.raises(DimensionError):
        ad.elementwise(np.ones((2, 3)), "add", np.ones((4,)))


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather_rows(np.ones((3, 2)), [0, 3])


def test_concat_ragged():
    with pytest.raises(DimensionError):
        ad.concat([np.ones((2, 3)), np.ones((2, 4))], axis=0)


def test_cross_entropy_all_masked():
    with pytest.raises(EmptyLossError):
        ad.cross_entropy(np.zeros((2, 3)), [0, 1], mask=[False, False])


def test_non_finite_values_are_rejected():
    with pytest.raises(NumericError):
        ad.log(np.array([0.0]))


def test_finite_difference_rejects_non_finite_function():
    with pytest.raises(NumericError):
        finite_difference_check(lambda t: ad.log(t - 1.0).sum(), np.array([1.0 + 1e-6]), eps=1e-5)


def test_elementwise_dispatch_names():
    x = np.array([0.3, -0.2])
    np.testing.assert_allclose(ad.elementwise(x, "tanh").data, np.tanh(x))
    np.testing.assert_allclose(ad.elementwise(x, "scale", 2.0).data, 2 * x)
    np.testing.assert_allclose(ad.elementwise(x, "mul", x).data, x * x)


def test_fault_injection_breaks_the_check():
    x = np.array([[0.1, 0.5, -0.3]])
    f = lambda t: (ad.tanh(t) * Tensor([[1.0, 2.0, 3.0]])).sum()  # noqa: E731
    assert finite_difference_check(f, x) <= 1e-6
    with ad.inject_backward_fault("tanh"):
        assert finite_difference_check(f, x) > 1e-3


def test_no_tape_records_nothing_and_keeps_values():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.exp(x)
    np.testing.assert_allclose(y.data, np.exp([1.0, 2.0]))


def test_unreachable_source_gets_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        y = (x * 2.0).sum()
    gx, gz = tape.gradient(y, [x, z])
    assert gx[0] == 2.0 and gz[0] == 0.0


def test_float32_scalar_ops_keep_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5).dtype == np.float32
    assert (x + 1.0).dtype == np.float32


# --- parameter store --------------------------------------------------------

def test_param_store_freezing_rules():
    store = ParamStore()
    store.add("lm.w", np.zeros(2))
    store.add("kprefix.e", np.zeros(2))
    store.set_trainable(["kprefix."])
    assert store.trainable_names() == ["kprefix.e"]
    with pytest.raises(FrozenParameterError):
        store.assign("lm.w", np.ones(2))
    store.assign("kprefix.e", np.ones(2))
    with store.locked():
        with pytest.raises(FrozenParameterError):
            store.set_trainable(["lm."])
    with pytest.raises(KeyError):
        store.add("lm.w", np.zeros(2))
    with pytest.raises(DimensionError):
        store.assign("kprefix.e", np.ones(3))


def test_param_store_arrays_are_read_only_copies():
    src = np.zeros(3)
    store = ParamStore()
    t = store.add("a", src)
    src[0] = 1.0
    assert t.data[0] == 0.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0
    assert store.count() == 3 and store.count(trainable_only=True) == 0
