"""Convolution kernels vs direct-loop oracles, across both backends."""

import numpy as np
import pytest

from martagan import reference
from martagan.autodiff import kernels


def random_case(rng):
    n = int(rng.integers(1, 4))
    c_in = int(rng.integers(1, 5))
    c_out = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    k = stride * int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    h = int(rng.integers(k, k + 6))
    w = int(rng.integers(k, k + 6))
    x = rng.standard_normal((n, c_in, h, w))
    weights = rng.standard_normal((c_out, c_in, k, k))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dout = rng.standard_normal((n, c_out, ho, wo))
    return x, weights, dout, stride, pad


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_forward_matches_loop_oracle(backend):
    rng = np.random.default_rng(0)
    fwd, _, _ = kernels.backend_functions(backend)
    for _ in range(25):
        x, w, _, stride, pad = random_case(rng)
        got = fwd(x, w, stride, pad)
        want = reference.conv2d_reference(x, w, stride=stride, pad=pad)
        assert np.abs(got - want).max() <= 1e-6


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backward_input_is_transposed_conv_oracle(backend):
    # the input gradient of conv IS the transposed conv forward
    rng = np.random.default_rng(1)
    _, bwd_in, _ = kernels.backend_functions(backend)
    for _ in range(25):
        x, w, dout, stride, pad = random_case(rng)
        k = w.shape[2]
        # snap the input so the conv consumes it exactly; then the input
        # gradient and the transposed-conv forward coincide on the nose
        h = x.shape[2] - (x.shape[2] + 2 * pad - k) % stride
        wid = x.shape[3] - (x.shape[3] + 2 * pad - k) % stride
        got = bwd_in(dout, w, stride, pad, h, wid)
        want = reference.conv_transpose2d_reference(dout, w, stride=stride, pad=pad)
        assert got.shape == want.shape
        assert np.abs(got - want).max() <= 1e-6


def test_backward_input_ragged_edge_agrees_on_overlap():
    # with a stride remainder, the transposed-conv crop drops edge mass the
    # gradient keeps; they still agree on the common canvas
    rng = np.random.default_rng(11)
    _, bwd_in, _ = kernels.backend_functions(kernels.get_backend())
    w = rng.standard_normal((2, 3, 4, 4))
    dout = rng.standard_normal((1, 2, 4, 4))
    got = bwd_in(dout, w, 2, 3, 5, 5)  # (5 + 6 - 4) % 2 == 1
    want = reference.conv_transpose2d_reference(dout, w, stride=2, pad=3)
    assert want.shape == (1, 3, 4, 4) and got.shape == (1, 3, 5, 5)
    assert np.abs(got[:, :, :4, :4] - want).max() <= 1e-6


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backward_weights_matches_accumulation_oracle(backend):
    rng = np.random.default_rng(2)
    _, _, bwd_w = kernels.backend_functions(backend)
    for _ in range(25):
        x, w, dout, stride, pad = random_case(rng)
        k = w.shape[2]
        got = bwd_w(dout, x, stride, pad, k)
        want = np.zeros_like(w)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        for f in range(w.shape[0]):
            for c in range(w.shape[1]):
                for p in range(k):
                    for q in range(k):
                        acc = 0.0
                        for i in range(dout.shape[2]):
                            for j in range(dout.shape[3]):
                                acc += (
                                    dout[:, f, i, j]
                                    * xp[:, c, i * stride + p, j * stride + q]
                                ).sum()
                        want[f, c, p, q] = acc
        assert np.abs(got - want).max() <= 1e-6


def test_backends_agree_bitwise_shapes():
    rng = np.random.default_rng(3)
    names = kernels.available_backends()
    if len(names) < 2:
        pytest.skip("only one backend available")
    for _ in range(10):
        x, w, dout, stride, pad = random_case(rng)
        outs = {}
        for name in names:
            fwd, bwd_in, bwd_w = kernels.backend_functions(name)
            outs[name] = (
                fwd(x, w, stride, pad),
                bwd_in(dout, w, stride, pad, x.shape[2], x.shape[3]),
                bwd_w(dout, x, stride, pad, w.shape[2]),
            )
        a, b = outs[names[0]], outs[names[1]]
        for ga, gb in zip(a, b):
            assert ga.shape == gb.shape
            assert np.abs(ga - gb).max() <= 1e-9


def test_backends_deterministic_run_to_run():
    rng = np.random.default_rng(4)
    x, w, dout, stride, pad = random_case(rng)
    for name in kernels.available_backends():
        fwd, _, _ = kernels.backend_functions(name)
        first = fwd(x, w, stride, pad)
        again = fwd(x, w, stride, pad)
        assert np.array_equal(first, again)


def test_set_backend_switches_and_rejects_unknown():
    before = kernels.get_backend()
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            assert kernels.get_backend() == name
        with pytest.raises(ValueError, match="unknown backend"):
            kernels.set_backend("cuda")
    finally:
        kernels.set_backend(before)


def test_dense_matmul_against_triple_loop():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((7, 11))
    b = rng.standard_normal((11, 3))
    assert np.abs(a @ b - reference.matmul_reference(a, b)).max() <= 1e-9
