"""Differentiable operations over :class:`Tensor`.

Every op computes eagerly with numpy (convolutions dispatch to the
kernel backend) and, when a Graph is active and gradients can flow,
records a backward closure on the tape. Without an active graph the
same functions behave as pure evaluation.
"""

import numpy as np

from . import kernels
from .tensor import Graph, Tensor

# test hook: name of an op whose backward is deliberately perturbed, so the
# verification suite can prove it catches a broken gradient
_BACKWARD_FAULT = None


def set_backward_fault(op_name):
    """Perturb the named op's backward pass (None restores). Test hook only."""
    global _BACKWARD_FAULT
    _BACKWARD_FAULT = op_name


def _need_flags(inputs):
    g = Graph.current()
    if g is None:
        return [False] * len(inputs)
    return [g.needs_grad(t) for t in inputs]


def _apply(op, inputs, out_data, backward_fn):
    g = Graph.current()
    if g is None:
        return Tensor(out_data)
    needs = [g.needs_grad(t) for t in inputs]
    out = Tensor(out_data, requires_grad=any(needs))
    if out.requires_grad:
        g.record(op, inputs, out, backward_fn)
    return out


def _open_unit_interval(arr):
    # strictly inside (0, 1) even where IEEE rounding saturates
    info = np.finfo(arr.dtype)
    return np.clip(arr, info.tiny, 1.0 - info.epsneg)


def _stable_sigmoid(arr):
    e = np.exp(-np.abs(arr))
    return np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """Strided 2-D cross-correlation: (N,C,H,W) x (F,C,k,k) -> (N,F,H',W')."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    n, c, h, wid = x.shape
    f, cw, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv2d weights must be square, got kernel {k}x{k2}")
    if c != cw:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, weights expect {cw} "
            f"(input {tuple(x.shape)}, weights {tuple(w.shape)})"
        )
    if h + 2 * pad < k or wid + 2 * pad < k:
        raise ValueError(
            f"conv2d: padded input {h + 2 * pad}x{wid + 2 * pad} smaller than kernel {k}"
        )
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {tuple(b.shape)}")

    out = kernels.conv2d_forward(x.data, w.data, stride, pad)
    if b is not None:
        out = out + b.data[None, :, None, None]

    inputs = [x, w] if b is None else [x, w, b]
    need = _need_flags(inputs)

    def backward_fn(gout):
        dx = kernels.conv2d_bwd_input(gout, w.data, stride, pad, h, wid) if need[0] else None
        dw = kernels.conv2d_bwd_weights(gout, x.data, stride, pad, k) if need[1] else None
        if dw is not None and _BACKWARD_FAULT == "conv2d":
            dw = dw * 1.01 + 1e-3
        if b is None:
            return dx, dw
        return dx, dw, gout.sum(axis=(0, 2, 3)) if need[2] else None

    return _apply("conv2d", inputs, out, backward_fn)


def conv_transpose2d(x, w, b=None, stride=1, pad=0):
    """Transposed conv (adjoint of conv2d): (N,C,H,W) x (C,F,k,k) -> (N,F,H',W').

    H' = (H-1)*stride - 2*pad + k. The kernel size must be divisible by
    the stride; uneven kernel/stride overlap is rejected outright because
    it produces checkerboard modulation.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv_transpose2d expects 4-D input and weights, got {x.shape} and {w.shape}"
        )
    n, c, h, wid = x.shape
    cw, f, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv_transpose2d weights must be square, got kernel {k}x{k2}")
    if k % stride != 0:
        raise ValueError(
            f"conv_transpose2d: kernel size {k} not divisible by stride {stride}; "
            "uneven overlap would produce checkerboard artifacts"
        )
    if c != cw:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {c} channels, weights expect {cw} "
            f"(input {tuple(x.shape)}, weights {tuple(w.shape)})"
        )
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wid - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: output size {ho}x{wo} is empty")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv_transpose2d bias must have shape ({f},), got {tuple(b.shape)}")

    # forward of the transposed conv == input-gradient of the direct conv
    out = kernels.conv2d_bwd_input(x.data, w.data, stride, pad, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    inputs = [x, w] if b is None else [x, w, b]
    need = _need_flags(inputs)

    def backward_fn(gout):
        dx = kernels.conv2d_forward(gout, w.data, stride, pad) if need[0] else None
        dw = kernels.conv2d_bwd_weights(x.data, gout, stride, pad, k) if need[1] else None
        if b is None:
            return dx, dw
        return dx, dw, gout.sum(axis=(0, 2, 3)) if need[2] else None

    return _apply("conv_transpose2d", inputs, out, backward_fn)


def max_pool2d(x, window):
    """Non-overlapping max pooling; window 1 is the identity."""
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d expects 4-D input, got {x.shape}")
    n, c, h, wid = x.shape
    if h % window or wid % window:
        raise ValueError(f"max_pool2d: window {window} does not divide input {h}x{wid}")
    if window == 1:
        return _apply("max_pool2d", [x], x.data, lambda gout: (gout,))

    ho, wo = h // window, wid // window
    tiles = (
        x.data.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    argmax = tiles.argmax(axis=-1)  # first max in scan order breaks ties
    out = np.take_along_axis(tiles, argmax[..., None], axis=-1)[..., 0]

    def backward_fn(gout):
        dtiles = np.zeros((n, c, ho, wo, window * window), dtype=gout.dtype)
        np.put_along_axis(dtiles, argmax[..., None], gout[..., None], axis=-1)
        dx = (
            dtiles.reshape(n, c, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, wid)
        )
        return (dx,)

    return _apply("max_pool2d", [x], out, backward_fn)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics."""

    def __init__(self, channels, decay=0.9, epsilon=1e-5, dtype=np.float64):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {decay}")
        if epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.decay = float(decay)
        self.epsilon = float(epsilon)

    @property
    def channels(self):
        return self.running_mean.shape[0]


def batch_norm2d(x, state, training):
    """Channel-wise batch normalization over (N, C, H, W).

    Training mode normalizes with batch statistics and advances the
    running statistics (running <- decay*running + (1-decay)*batch);
    inference mode normalizes with the stored running statistics and
    mutates nothing.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d expects 4-D input, got {x.shape}")
    n, c, h, wid = x.shape
    if c != state.channels:
        raise ValueError(f"batch_norm2d: input has {c} channels, state has {state.channels}")

    gamma, beta = state.gamma, state.beta
    eps = state.epsilon
    axes = (0, 2, 3)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased estimator
        state.running_mean = state.decay * state.running_mean + (1.0 - state.decay) * mean
        state.running_var = state.decay * state.running_var + (1.0 - state.decay) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    need = _need_flags([x, gamma, beta])

    def backward_fn(gout):
        dgamma = (gout * xhat).sum(axis=axes) if need[1] else None
        dbeta = gout.sum(axis=axes) if need[2] else None
        if not need[0]:
            return None, dgamma, dbeta
        dxhat = gout * gamma.data[None, :, None, None]
        if training:
            # gradient through the batch statistics
            mean_dxhat = dxhat.mean(axis=axes)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
            dx = (
                dxhat
                - mean_dxhat[None, :, None, None]
                - xhat * mean_dxhat_xhat[None, :, None, None]
            ) * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _apply("batch_norm2d", [x, gamma, beta], out, backward_fn)


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def relu(x):
    # np.maximum (not where) so NaN propagates and divergence stays visible
    mask = x.data > 0
    return _apply("relu", [x], np.maximum(x.data, 0.0), lambda g: (np.where(mask, g, 0.0),))


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return _apply("leaky_relu", [x], out, lambda g: (np.where(mask, g, slope * g),))


def tanh(x):
    out = np.tanh(x.data)
    info = np.finfo(out.dtype)
    out = np.clip(out, -1.0 + info.epsneg, 1.0 - info.epsneg)
    return _apply("tanh", [x], out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    out = _open_unit_interval(_stable_sigmoid(x.data))
    return _apply("sigmoid", [x], out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x):
    # -softplus(-x), computed without forming the probability
    out = -(np.log1p(np.exp(-np.abs(x.data))) + np.maximum(-x.data, 0.0))

    def backward_fn(g):
        return (g * _stable_sigmoid(-x.data),)

    return _apply("log_sigmoid", [x], out, backward_fn)


# ---------------------------------------------------------------------------
# dense / shape / reduction plumbing
# ---------------------------------------------------------------------------

def dense(x, w, b=None):
    """Affine map (N,D) x (D,M) -> (N,M)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"dense expects 2-D input and weights, got {x.shape} and {w.shape}")
    n, d = x.shape
    dw_, m = w.shape
    if d != dw_:
        raise ValueError(f"dense dimension mismatch: input D={d}, weights D={dw_}")
    if b is not None and b.shape != (m,):
        raise ValueError(f"dense bias must have shape ({m},), got {tuple(b.shape)}")

    out = x.data @ w.data
    if b is not None:
        out = out + b.data[None, :]
    inputs = [x, w] if b is None else [x, w, b]
    need = _need_flags(inputs)

    def backward_fn(g):
        dx = g @ w.data.T if need[0] else None
        dwt = x.data.T @ g if need[1] else None
        if b is None:
            return dx, dwt
        return dx, dwt, g.sum(axis=0) if need[2] else None

    return _apply("dense", inputs, out, backward_fn)


def concat_channels(inputs):
    """Concatenate (N,Ci,H,W) tensors along the channel axis."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.data.ndim != 4:
            raise ValueError(f"concat_channels expects 4-D inputs, got {t.shape}")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels: mismatched batch/spatial dims {tuple(t.shape)} vs {tuple(ref)}"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward_fn(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(inputs)))

    return _apply("concat_channels", list(inputs), out, backward_fn)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.numel:
        raise ValueError(f"reshape: cannot view {x.numel} elements as {shape}")
    orig = x.shape
    return _apply("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(orig),))


def flatten(x):
    """(N, ...) -> (N, prod(rest))."""
    n = x.shape[0]
    return reshape(x, (n, x.numel // n))


def mean_all(x):
    count = x.numel
    out = np.asarray(x.data.mean())

    def backward_fn(g):
        return (np.broadcast_to(g / count, x.shape),)

    return _apply("mean_all", [x], out, backward_fn)


def sum_all(x):
    out = np.asarray(x.data.sum())
    return _apply("sum_all", [x], out, lambda g: (np.broadcast_to(g, x.shape),))


def mean_over_batch(x):
    """(N, D) -> (D,), averaging over the batch axis."""
    if x.data.ndim != 2:
        raise ValueError(f"mean_over_batch expects a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    out = x.data.mean(axis=0)

    def backward_fn(g):
        return (np.broadcast_to(g[None, :] / n, x.shape),)

    return _apply("mean_over_batch", [x], out, backward_fn)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _apply("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a, b):
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _apply("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def neg(a):
    return _apply("neg", [a], -a.data, lambda g: (-g,))


def square(a):
    return _apply("square", [a], a.data * a.data, lambda g: (2.0 * a.data * g,))


def mul_scalar(a, c):
    c = float(c)
    return _apply("mul_scalar", [a], a.data * c, lambda g: (g * c,))
