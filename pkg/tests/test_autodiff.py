import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astgan import autodiff as ad
from astgan.autodiff import DomainError, ShapeError, Value

from gradcheck import check_grad


def leaf(x):
    return Value(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_add_mul_values():
    a, b = Value([1.0, 2.0]), Value([3.0, 4.0])
    np.testing.assert_allclose(ad.add(a, b).data, [4, 6])
    np.testing.assert_allclose(ad.mul(a, b).data, [3, 8])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Value(np.ones((2, 3))), Value(np.ones((4, 5))))


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(Value(np.zeros(4))).data, [0.25] * 4)


def test_softmax_mask_gives_exact_zeros():
    y = ad.softmax(Value([1.0, 2.0, 3.0]), mask=[True, False, True]).data
    assert y[1] == 0.0
    assert y.sum() == pytest.approx(1.0)


def test_log_of_zero_is_domain_error():
    with pytest.raises(DomainError):
        ad.log(Value([1.0, 0.0]))


def test_sigmoid_extremes_are_finite():
    y = ad.sigmoid(Value([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-6)


def test_backward_rejects_non_scalar_root():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, 2.0))


def test_gradient_accumulates_over_reuse():
    x = leaf(3.0)
    ad.backward(ad.add(ad.mul(x, x), x))
    assert x.grad == pytest.approx(7.0)


def test_gradients_accumulate_across_backward_calls():
    x = leaf(2.0)
    ad.backward(ad.mul(x, 3.0))
    ad.backward(ad.mul(x, 3.0))
    assert x.grad == pytest.approx(6.0)


def test_no_grad_detaches():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad


def test_precision_context_switches_dtype():
    with ad.precision(np.float64):
        assert Value(1.0).data.dtype == np.float64
    assert Value(1.0).data.dtype == np.float32


def test_embedding_lookup_out_of_range():
    with pytest.raises(ShapeError):
        ad.embedding_lookup(Value(np.ones((3, 2))), [0, 3])


def test_embedding_gradient_scatters_repeats():
    t = leaf(np.zeros((3, 2)))
    ad.backward(ad.sum(ad.embedding_lookup(t, [1, 1, 2])))
    np.testing.assert_allclose(t.grad, [[0, 0], [2, 2], [1, 1]])


def test_adam_step_moves_against_gradient_and_zeroes():
    ps = ad.ParameterStore()
    w = ps.add("w", np.array([1.0, -1.0]))
    opt = ad.AdamState.for_params(ps, lr=0.1)
    ad.backward(ad.sum(ad.mul(w, w)))
    ad.adam_step(ps, opt)
    np.testing.assert_allclose(w.data, [0.9, -0.9], atol=1e-6)
    assert w._grad is None


def test_parameter_store_rejects_duplicates_and_bad_shapes():
    ps = ad.ParameterStore()
    ps.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(2))
    with pytest.raises(ShapeError):
        ps.load_arrays({"a": np.zeros(3, dtype=np.float32)})


def test_xavier_bounds():
    v = ad.xavier_uniform((50, 30), 50, 30, np.random.default_rng(0))
    assert np.abs(v.data).max() <= np.sqrt(6 / 80)


# finite-difference checks of each primitive

PRIMS = {
    "add_broadcast": (lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (4,)]),
    "mul": (lambda a, b: ad.sum(ad.mul(ad.mul(a, b), a)), [(3, 4), (3, 1)]),
    "matmul": (lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), [(3, 4), (4, 2)]),
    "matmul3": (lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "concat": (lambda a, b: ad.sum(ad.tanh(ad.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: ad.sum(ad.tanh(ad.stack([a, b], axis=1))), [(2, 3), (2, 3)]),
    "sigmoid": (lambda a: ad.sum(ad.mul(ad.sigmoid(a), a)), [(5,)]),
    "tanh": (lambda a: ad.sum(ad.mul(ad.tanh(a), a)), [(5,)]),
    "relu": (lambda a: ad.sum(ad.mul(ad.relu(a), a)), [(6,)]),
    "softmax": (lambda a, w: ad.sum(ad.mul(ad.softmax(a, axis=1), w)), [(3, 4), (3, 4)]),
    "softmax_masked": (lambda a, w: ad.sum(ad.mul(ad.softmax(a, axis=1, mask=np.array([1, 0, 1, 1], bool)), w)),
                       [(3, 4), (3, 4)]),
    "log_softmax": (lambda a, w: ad.sum(ad.mul(ad.log_softmax(a, axis=1), w)), [(3, 4), (3, 4)]),
    "log": (lambda a: ad.sum(ad.log(ad.add(ad.mul(a, a), 1.0))), [(4,)]),
    "mean": (lambda a: ad.sum(ad.mean(ad.mul(a, a), axis=0)), [(3, 2)]),
    "embedding": (lambda t: ad.sum(ad.tanh(ad.embedding_lookup(t, [[0, 2], [2, 1]]))), [(3, 2)]),
    "slice": (lambda a: ad.sum(ad.tanh(ad.slice(a, (slice(None), 1)))), [(3, 4)]),
    "pick": (lambda a: ad.sum(ad.tanh(ad.pick(a, [2, 0, 1]))), [(3, 4)]),
    "take_rows": (lambda a: ad.sum(ad.tanh(ad.take_rows(a, [0, 0, 2]))), [(3, 2)]),
    "gather_steps": (lambda a, b: ad.sum(ad.tanh(ad.gather_steps([a, b], [1, 0, 1]))), [(3, 2), (3, 2)]),
    "reshape": (lambda a: ad.sum(ad.tanh(ad.mul(ad.reshape(a, (3, 2)), np.arange(6.0).reshape(3, 2)))),
                [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradient(name):
    fn, shapes = PRIMS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        inputs = [rng.normal(size=s) for s in shapes]
        if name == "relu":
            inputs[0] = np.where(np.abs(inputs[0]) < 0.05, 0.3, inputs[0])
        err = check_grad(fn, inputs)
        assert err < 1e-4, f"{name}: relative error {err}"


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(b, n, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(b, n))
    y = ad.softmax(Value(x), axis=1).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-5)
    assert np.all(y >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_log_softmax_matches_log_of_softmax(n, seed):
    x = np.random.default_rng(seed).normal(size=(2, n))
    with ad.precision(np.float64):
        a = ad.log_softmax(Value(x), axis=1).data
        b = np.log(ad.softmax(Value(x), axis=1).data)
    np.testing.assert_allclose(a, b, atol=1e-10)
