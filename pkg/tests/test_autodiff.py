import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid3d import ops
from hybrid3d.gradcheck import KinkDetected, PRIMITIVES, check_primitive, gradcheck
from hybrid3d.tensor import ContractError, DimensionError, Tensor, backward, no_grad

from oracles import mp_cross_entropy, mp_softmax, naive_conv

rng0 = np.random.default_rng(1234)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- convolution -----------------------------------------------------------------------------

@pytest.mark.parametrize("shape,wshape,stride,padding", [
    ((2, 3, 7, 6), (4, 3, 3, 3), 1, 1),
    ((1, 2, 8, 8), (3, 2, 3, 3), 2, 1),
    ((2, 3, 9, 9), (2, 3, 7, 7), 2, 3),
    ((1, 2, 5, 5), (2, 2, 1, 1), 2, 0),
])
def test_conv2d_matches_nested_loop_reference(shape, wshape, stride, padding):
    x, w, b = rng0.standard_normal(shape), rng0.standard_normal(wshape), rng0.standard_normal(wshape[0])
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv3d_matches_nested_loop_reference():
    x, w, b = rng0.standard_normal((2, 2, 3, 4, 5)), rng0.standard_normal((3, 2, 3, 3, 3)), rng0.standard_normal(3)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, 1, 1), rtol=0, atol=1e-12)


def test_conv_shapes_and_zero_input():
    out = ops.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.ones((4, 3, 3, 3))),
                     Tensor(np.arange(4.0)), 1, 1)
    assert out.shape == (1, 4, 8, 8)
    assert np.all(out.data == np.arange(4.0)[None, :, None, None])
    vol = ops.conv3d(Tensor(np.zeros((1, 3, 9, 8, 8))), Tensor(np.ones((5, 3, 3, 3, 3))),
                     Tensor(np.full(5, 2.5)))
    assert vol.shape == (1, 5, 9, 8, 8) and np.all(vol.data == 2.5)


def test_conv_table_one_shapes_by_shape_arithmetic():
    # [1,3,9,32,32] -> 64 -> 128 channels with k3 s1 p1 keeps D,H,W
    for c_in, c_out in ((3, 64), (64, 128)):
        dims = [ops.conv_output_size(s, 3, 1, 1) for s in (9, 32, 32)]
        assert dims == [9, 32, 32]
    x = Tensor(rng0.standard_normal((1, 3, 9, 32, 32)))
    assert ops.conv3d(x, Tensor(rng0.standard_normal((8, 3, 3, 3, 3)))).shape == (1, 8, 9, 32, 32)


def test_conv_channel_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))))


@given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 3),
       s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_shape_follows_floor_formula(h, w, k, s, p):
    x = Tensor(np.ones((1, 1, h, w)))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, k, k))), None, s, p)
    assert out.shape[2:] == ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


@given(d=st.integers(1, 10), h=st.integers(1, 10), k=st.integers(1, 4))
def test_avg_pool_shape_follows_floor_division(d, h, k):
    if min(d, h) < k:
        with pytest.raises(DimensionError):
            ops.avg_pool(Tensor(np.ones((1, 1, d, h, h))), k)
        return
    assert ops.avg_pool(Tensor(np.ones((1, 1, d, h, h))), k).shape == (1, 1, d // k, h // k, h // k)


# -- batch norm -------------------------------------------------------------------------------

def test_batch_norm_standardised_input_is_nearly_unchanged():
    x = rng0.standard_normal((4, 3, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = ops.batch_norm(Tensor(x), np.zeros(3), np.ones(3), T(np.ones(3)), T(np.zeros(3)),
                         training=True, eps=1e-12)
    assert np.max(np.abs(out.data - x)) < 1e-6


def test_batch_norm_zero_gamma_gives_beta():
    out = ops.batch_norm(Tensor(rng0.standard_normal((4, 3, 5, 5))), np.zeros(3), np.ones(3),
                         T(np.zeros(3)), T(np.full(3, 5.0)), training=True)
    assert np.all(out.data == 5.0)


def test_batch_norm_running_statistics_update():
    x = rng0.standard_normal((4, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), rm, rv, T(np.ones(2)), T(np.zeros(2)), training=True)
    m = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-15)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), atol=1e-14)
    ev = ops.batch_norm(Tensor(x), rm, rv, T(np.ones(2)), T(np.zeros(2)), training=False)
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(ev.data, expect, atol=1e-14)


def test_batch_norm_single_value_per_channel_is_rejected():
    with pytest.raises(ops.DegenerateVarianceError):
        ops.batch_norm(Tensor(np.ones((1, 3, 1, 1))), np.zeros(3), np.ones(3),
                       T(np.ones(3)), T(np.zeros(3)), training=True)


# -- elementwise, pooling, dense ----------------------------------------------------------------

def test_relu_values_and_gradient_indicator():
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = T(rng0.standard_normal(50))
    backward(ops.sum(ops.relu(x)))
    assert np.array_equal(x.grad, (x.data > 0).astype(float))
    pos = np.abs(rng0.standard_normal(9)) + 0.1
    assert np.array_equal(ops.relu(Tensor(pos)).data, pos)


def test_relu_subgradient_at_zero_is_zero():
    x = T(np.zeros(4))
    backward(ops.sum(ops.relu(x)))
    assert np.all(x.grad == 0)


def test_avg_pool_examples_and_bad_kernel():
    out = ops.avg_pool(Tensor(np.full((1, 1, 4, 4), 2.0)), 2)
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 2.0)
    assert ops.avg_pool(Tensor(np.zeros((1, 1, 9, 32, 32))), 3, "3D").shape == (1, 1, 3, 10, 10)
    with pytest.raises(ValueError):
        ops.avg_pool(Tensor(np.zeros((1, 1, 4, 4))), 0)


def test_avg_pool_gradient_is_uniform_share():
    x = T(rng0.standard_normal((1, 1, 4, 5)))
    backward(ops.sum(ops.avg_pool(x, 2)))
    expect = np.zeros((1, 1, 4, 5))
    expect[..., :4, :4] = 0.25
    assert np.array_equal(x.grad, expect)


def test_adaptive_pool_channel_means():
    wobble = np.array([[0.5, -0.5, 0.0], [0.2, 0.0, -0.2], [-0.7, 0.7, 0.0]])
    x = np.stack([1.0 + wobble, -2.0 - wobble])[None]
    out = ops.adaptive_avg_pool_to_one(Tensor(x))
    assert out.shape == (1, 2, 1, 1)
    np.testing.assert_allclose(out.data.ravel(), [1.0, -2.0], atol=1e-15)
    assert ops.adaptive_avg_pool_to_one(Tensor(np.full((1, 1, 3, 4, 5), 0.3))).data.item() == pytest.approx(0.3, abs=1e-15)


def test_dense_identity_and_table_shape():
    x = rng0.standard_normal((3, 5))
    assert np.array_equal(ops.dense(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
    assert ops.dense(Tensor(np.ones((1, 256))), Tensor(np.ones((512, 256)))).shape == (1, 512)
    with pytest.raises(DimensionError):
        ops.dense(Tensor(np.ones((1, 4))), Tensor(np.ones((2, 5))))


# -- softmax and losses -------------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(ops.softmax(Tensor(np.zeros((1, 4)))).data, 0.25, atol=0, rtol=0)
    big = ops.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and big[0, 0] == 1.0 and big[0, 1] < 1e-300
    got = ops.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(got, mp_softmax([1, 2, 3]), rtol=0, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one_and_are_monotone(row):
    s = ops.softmax(Tensor([row])).data[0]
    assert abs(s.sum() - 1.0) < 1e-9
    assert np.all(s >= 0) and np.all(s <= 1)
    order = np.argsort(row, kind="stable")
    assert np.all(np.diff(s[order]) >= -1e-15)


def test_cross_entropy_examples():
    for k in (2, 4, 7):
        assert abs(ops.cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 1]).item() - math.log(k)) < 1e-12
    got = ops.cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item()
    assert abs(got - float(mp_cross_entropy([[1, 2, 3]], [2]))) < 1e-12
    assert ops.cross_entropy(Tensor([[200.0, 0.0, 0.0]]), [0]).item() < 1e-80
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_binary_cross_entropy_examples():
    assert abs(ops.binary_cross_entropy(Tensor([[0.0]]), [1]).item() - math.log(2)) < 1e-15
    assert ops.binary_cross_entropy(Tensor([[60.0]]), [1]).item() < 1e-25
    z = rng0.standard_normal((32, 2)) * 3
    t = rng0.integers(0, 2, 32)
    assert abs(ops.binary_cross_entropy(Tensor(z), t).item() - ops.cross_entropy(Tensor(z), t).item()) < 1e-9
    with pytest.raises(ops.ConfigurationError):
        ops.binary_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1])


def test_mse_examples():
    p = rng0.random((3, 4))
    assert ops.mse(Tensor(p), Tensor(p)).item() == 0.0
    assert ops.mse(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 1.0
    with pytest.raises(DimensionError):
        ops.mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# -- tape semantics -----------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = T(rng0.standard_normal((3, 4)))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_mse_against_detached_copy_has_zero_gradient():
    x = T(rng0.standard_normal(6))
    backward(ops.mse(x, x.detach()))
    assert np.all(x.grad == 0)


def test_reuse_accumulates_gradients():
    x = T(rng0.standard_normal(5))
    backward(ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0))))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3, atol=1e-15)
    assert gradcheck(lambda a: ops.sum(ops.mul(ops.mul(a, a), a)), [x]) < 1e-8


def test_backward_needs_scalar_and_clears_tape():
    x = T(np.ones(3))
    with pytest.raises(ContractError):
        backward(ops.scale(x, 2.0))
    y = ops.sum(ops.scale(x, 2.0))
    backward(y)
    # the tape is gone: y is now stale and cannot be differentiated again
    with pytest.raises(ContractError):
        backward(y)


def test_no_grad_records_nothing():
    x = T(np.ones(3))
    with no_grad():
        y = ops.sum(x)
    with pytest.raises(ContractError):
        backward(y)


def test_determinism_bitwise():
    x, w = rng0.standard_normal((2, 3, 6, 6)), rng0.standard_normal((4, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# -- gradcheck tool -----------------------------------------------------------------------------

def test_gradcheck_exact_quadratic():
    x = T(rng0.standard_normal(10))
    assert gradcheck(lambda a: ops.scale(ops.sum(ops.mul(a, a)), 0.5), [x]) < 1e-9


def test_gradcheck_flags_a_wrong_gradient():
    from hybrid3d.tensor import record

    def bad_square(a):
        return record("bad", (a,), a.data ** 2, lambda g: (g * a.data,))  # missing factor 2

    x = T(rng0.standard_normal(4) + 3)
    assert gradcheck(lambda a: ops.sum(bad_square(a)), [x]) > 0.1


def test_gradcheck_rejects_relu_kink():
    x = T(np.array([0.0, 1.0]))
    with pytest.raises(KinkDetected):
        gradcheck(lambda a: ops.sum(ops.relu(a)), [x], kink_tol=1e-3)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_quick(name):
    assert check_primitive(name, trials=5, seed=7) < 1e-6
