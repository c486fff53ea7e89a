"""Forward semantics, validation, and tape rules for the autodiff ops."""

import numpy as np
import pytest

from martagan import reference
from martagan.autodiff import Graph, Tensor, ops
from martagan.reference import max_pool2d_reference


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# convolution ops
# ---------------------------------------------------------------------------

def test_conv2d_forward_matches_reference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 4, 4))
    b = rng.standard_normal(4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
    want = reference.conv2d_reference(x, w, b, stride=2, pad=1)
    assert np.abs(out.data - want).max() <= 1e-6


def test_conv2d_rejects_channel_mismatch():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((4, 2, 4, 4)))
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(x, w, None, stride=2, pad=1)


def test_transposed_conv_requires_stride_dividing_kernel():
    # k=3, s=2 produces uneven overlap (checkerboard artifacts) upsampling;
    # the same combination remains a perfectly normal strided conv
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    with pytest.raises(ValueError, match="checkerboard"):
        ops.conv_transpose2d(x, w, None, stride=2, pad=1)
    out = ops.conv2d(x, w, None, stride=2, pad=1)
    assert out.shape == (1, 4, 4, 4)


def test_conv_transpose_matches_scatter_reference():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 3, 4, 4))
    out = ops.conv_transpose2d(Tensor(x), Tensor(w), None, stride=2, pad=1)
    want = reference.conv_transpose2d_reference(x, w, stride=2, pad=1)
    assert out.shape == want.shape
    assert np.abs(out.data - want).max() <= 1e-6


def test_conv_transpose_even_coverage_interior_constant():
    # constant input, constant kernel, k divisible by stride: every interior
    # output pixel receives the same number of contributions
    x = Tensor(np.ones((1, 1, 6, 6)))
    w = Tensor(np.ones((1, 1, 4, 4)))
    out = ops.conv_transpose2d(x, w, None, stride=2, pad=1).data[0, 0]
    interior = out[1:-1, 1:-1]
    assert np.all(interior == interior[0, 0])


def test_conv_transpose_upsamples_2x():
    x = Tensor(np.zeros((3, 8, 4, 4)))
    w = Tensor(np.zeros((8, 5, 4, 4)))
    out = ops.conv_transpose2d(x, w, None, stride=2, pad=1)
    assert out.shape == (3, 5, 8, 8)


# ---------------------------------------------------------------------------
# pooling, batch norm
# ---------------------------------------------------------------------------

def test_max_pool_matches_reference_and_window1_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    out = ops.max_pool2d(Tensor(x), 4)
    assert np.array_equal(out.data, max_pool2d_reference(x, 4))
    same = ops.max_pool2d(Tensor(x), 1)
    assert np.array_equal(same.data, x)


def test_max_pool_backward_routes_to_argmax():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 2] = 5.0  # unique max of the single 4x4 window
    with Graph() as g:
        xt = t(x)
        loss = ops.sum_all(ops.max_pool2d(xt, 4))
        g.backward(loss)
    want = np.zeros_like(x)
    want[0, 0, 1, 2] = 1.0
    assert np.array_equal(xt.grad, want)


def test_max_pool_rejects_nondivisible_window():
    with pytest.raises(ValueError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 10, 10))), 4)


def test_batch_norm_train_normalizes_and_tracks_running_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 3, 5, 5)) * 3.0 + 2.0
    st = ops.BatchNormState(3)
    out = ops.batch_norm2d(Tensor(x), st, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-7
    # normalized variance is var/(var+eps), i.e. 1 - O(eps)
    assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() <= 1e-4
    # one update moves running stats 10% of the way (decay 0.9 from 0/1)
    want_mean = 0.1 * x.mean(axis=(0, 2, 3))
    want_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3))
    assert np.abs(st.running_mean - want_mean).max() <= 1e-10
    assert np.abs(st.running_var - want_var).max() <= 1e-10


def test_batch_norm_inference_uses_running_stats_only():
    rng = np.random.default_rng(4)
    st = ops.BatchNormState(2)
    st.running_mean[:] = [1.0, -2.0]
    st.running_var[:] = [4.0, 0.25]
    saved_mean = st.running_mean.copy()
    x = rng.standard_normal((3, 2, 4, 4))
    out = ops.batch_norm2d(Tensor(x), st, training=False).data
    want = (x - saved_mean[:, None, None]) / np.sqrt(
        np.array([4.0, 0.25])[:, None, None] + 1e-5
    )
    assert np.abs(out - want).max() <= 1e-7
    assert np.array_equal(st.running_mean, saved_mean)  # no update in inference


def test_batch_norm_applies_gamma_beta():
    st = ops.BatchNormState(1)
    st.gamma.data[:] = 3.0
    st.beta.data[:] = -1.0
    x = np.random.default_rng(5).standard_normal((8, 1, 4, 4))
    out = ops.batch_norm2d(Tensor(x), st, training=True).data
    assert abs(out.mean() - (-1.0)) <= 1e-7
    assert abs(out.std() - 3.0) <= 1e-2


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_leaky_relu_slope():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    out = ops.leaky_relu(Tensor(x), 0.2).data
    assert np.allclose(out, [-0.4, -0.1, 0.0, 0.5, 2.0])


def test_relu_clips_negatives():
    x = np.array([-1.0, 0.0, 2.5])
    assert np.allclose(ops.relu(Tensor(x)).data, [0.0, 0.0, 2.5])


def test_tanh_sigmoid_stay_strictly_inside_bounds():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=np.float32)
    th = ops.tanh(Tensor(x)).data
    sg = ops.sigmoid(Tensor(x)).data
    assert np.all(th > -1.0) and np.all(th < 1.0)
    assert np.all(sg > 0.0) and np.all(sg < 1.0)


def test_log_sigmoid_stable_at_extremes():
    x = np.array([-1e4, 0.0, 1e4])
    out = ops.log_sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(out))
    assert abs(out[1] - np.log(0.5)) <= 1e-12
    assert abs(out[0] - (-1e4)) <= 1e-6  # log sigmoid(x) -> x as x -> -inf
    assert abs(out[2]) <= 1e-6


# ---------------------------------------------------------------------------
# dense, concat, shaping, arithmetic
# ---------------------------------------------------------------------------

def test_dense_with_and_without_bias():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 7))
    w = rng.standard_normal((7, 2))
    b = rng.standard_normal(2)
    assert np.abs(ops.dense(Tensor(x), Tensor(w), Tensor(b)).data - (x @ w + b)).max() <= 1e-12
    assert np.abs(ops.dense(Tensor(x), Tensor(w)).data - x @ w).max() <= 1e-12


def test_concat_channels_splits_gradient():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 5, 4, 4))
    target = rng.standard_normal((2, 8, 4, 4))
    with Graph() as g:
        at, bt = t(a), t(b)
        out = ops.concat_channels([at, bt])
        assert out.shape == (2, 8, 4, 4)
        loss = ops.sum_all(ops.square(ops.sub(out, Tensor(target))))
        g.backward(loss)
    # d/dx sum((x - t)^2) = 2 (x - t), sliced back per input
    assert np.abs(at.grad - 2.0 * (a - target[:, :3])).max() <= 1e-12
    assert np.abs(bt.grad - 2.0 * (b - target[:, 3:])).max() <= 1e-12


def test_reshape_flatten_roundtrip_and_grad():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 2, 4, 4))
    with Graph() as g:
        xt = t(x)
        flat = ops.flatten(xt)
        assert flat.shape == (3, 32)
        back = ops.reshape(flat, x.shape)
        loss = ops.sum_all(ops.square(back))
        g.backward(loss)
    assert np.abs(xt.grad - 2.0 * x).max() <= 1e-12


def test_arithmetic_ops():
    a, b = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert np.allclose(ops.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.allclose(ops.sub(Tensor(a), Tensor(b)).data, a - b)
    assert np.allclose(ops.neg(Tensor(a)).data, -a)
    assert np.allclose(ops.square(Tensor(a)).data, a * a)
    assert np.allclose(ops.mul_scalar(Tensor(a), 3.0).data, 3.0 * a)
    assert abs(ops.mean_all(Tensor(a)).item() - 1.5) <= 1e-15
    assert abs(ops.sum_all(Tensor(a)).item() - 3.0) <= 1e-15


# ---------------------------------------------------------------------------
# tape rules
# ---------------------------------------------------------------------------

def test_tape_is_single_use():
    with Graph() as g:
        x = t([2.0])
        loss = ops.sum_all(ops.square(x))
        g.backward(loss)
        with pytest.raises(RuntimeError, match="single-use"):
            g.backward(loss)


def test_backward_needs_scalar_and_same_graph():
    with Graph() as g:
        x = t([1.0, 2.0])
        y = ops.square(x)
        with pytest.raises(ValueError, match="scalar"):
            g.backward(y)
    with Graph() as g2:
        with pytest.raises(ValueError, match="not produced"):
            g2.backward(y)


def test_no_recording_outside_graph():
    x = t([1.0, 2.0])
    y = ops.square(x)
    assert y.grad is None and x.grad is None  # eager: nothing to backprop


def test_frozen_params_receive_no_gradient():
    from martagan.train import _FrozenParams

    w = t(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = t(np.array([[1.0, 1.0]]))
    with _FrozenParams([w]), Graph() as g:
        loss = ops.sum_all(ops.dense(x, w))
        g.backward(loss)
    assert w.grad is None
    assert x.grad is not None


def test_backward_fault_hook_perturbs_conv_only():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 4, 4))

    def conv_weight_grad():
        with Graph() as g:
            wt = t(w)
            loss = ops.mean_all(ops.square(ops.conv2d(Tensor(x), wt, None, 2, 1)))
            g.backward(loss)
        return wt.grad

    clean = conv_weight_grad()
    ops.set_backward_fault("conv2d")
    try:
        faulty = conv_weight_grad()
    finally:
        ops.set_backward_fault(None)
    assert np.abs(clean - faulty).max() > 1e-4
    assert np.abs(clean - conv_weight_grad()).max() == 0.0  # hook reset
