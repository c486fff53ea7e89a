"""Hot convolution kernels, dual-backend.

The three primitives below (strided conv forward, its input gradient and
its weight gradient) carry all convolution work in the engine; transposed
convolution is expressed through the same trio (its forward IS the conv
input-gradient, and vice versa).

Backends, selected by the ``MARTAGAN_BACKEND`` environment variable or
``set_backend``:

* ``numpy`` (default) — im2col via strided views, contracted with
  ``tensordot`` so the heavy lifting lands in BLAS.
* ``numba`` — direct-loop JIT kernels with no patch temporaries. Loses
  to BLAS at training shapes (see benchmarks/bench_kernels.py) but
  keeps memory flat and serves as an independent implementation for
  equivalence checks.

Both backends are deterministic run-to-run: every output element is
produced by exactly one thread with a fixed inner summation order.
"""

import os
import warnings

import numpy as np

# The TBB version probe inside numba warns on this platform; the fallback
# threading layer is used either way.
warnings.filterwarnings("ignore", message=".*TBB.*", category=Warning)

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure-NumPy backend (im2col / col2im style)
# ---------------------------------------------------------------------------

def _patches(xp, k, stride, ho, wo):
    # strided view (N, C, Ho, Wo, k, k) over the padded input
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw)
    )


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward_numpy(x, w, stride, pad):
    k = w.shape[2]
    h, wid = x.shape[2], x.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    cols = _patches(_pad(x, pad), k, stride, ho, wo)
    out = np.einsum("nchwpq,fcpq->nfhw", cols, w, optimize=True)
    return np.ascontiguousarray(out)


def conv2d_bwd_input_numpy(dout, w, stride, pad, h, wid):
    n = dout.shape[0]
    c, k = w.shape[1], w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, wid + 2 * pad), dtype=dout.dtype)
    for p in range(k):
        for q in range(k):
            contrib = np.einsum("nfij,fc->ncij", dout, w[:, :, p, q], optimize=True)
            dxp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += contrib
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wid])


def conv2d_bwd_weights_numpy(dout, x, stride, pad, k):
    ho, wo = dout.shape[2], dout.shape[3]
    cols = _patches(_pad(x, pad), k, stride, ho, wo)
    dw = np.einsum("nfij,ncijpq->fcpq", dout, cols, optimize=True)
    return np.ascontiguousarray(dw)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    # All loops keep the innermost index walking a contiguous (or fixed-
    # stride) row so LLVM can vectorize; column bounds are hoisted out of
    # the hot loop. fastmath is restricted to reassociation + FMA so NaN
    # and infinity still propagate (divergence detection relies on it).
    _FASTMATH = {"reassoc", "contract", "arcp"}

    @njit(cache=True, parallel=True, fastmath=_FASTMATH)
    def _conv2d_forward_nb(x, w, stride, pad, out):
        n_batch, c_in, h, wid = x.shape
        f_out = w.shape[0]
        k = w.shape[2]
        ho, wo = out.shape[2], out.shape[3]
        for n in prange(n_batch):
            for i in range(ho):
                for f in range(f_out):
                    for j in range(wo):
                        out[n, f, i, j] = 0.0
                for c in range(c_in):
                    for p in range(k):
                        y = i * stride - pad + p
                        if y < 0 or y >= h:
                            continue
                        for f in range(f_out):
                            for q in range(k):
                                wv = w[f, c, p, q]
                                j0 = max(0, -((q - pad) // stride))
                                j1 = min(wo, (wid - 1 - q + pad) // stride + 1)
                                for j in range(j0, j1):
                                    out[n, f, i, j] += wv * x[n, c, y, j * stride - pad + q]

    @njit(cache=True, parallel=True, fastmath=_FASTMATH)
    def _conv2d_bwd_input_nb(dout, w, stride, pad, dx):
        n_batch, f_out, ho, wo = dout.shape
        c_in = w.shape[1]
        k = w.shape[2]
        h, wid = dx.shape[2], dx.shape[3]
        for n in prange(n_batch):
            for c in range(c_in):
                for y in range(h):
                    for xx in range(wid):
                        dx[n, c, y, xx] = 0.0
            for c in range(c_in):
                for i in range(ho):
                    for p in range(k):
                        y = i * stride - pad + p
                        if y < 0 or y >= h:
                            continue
                        for f in range(f_out):
                            for q in range(k):
                                wv = w[f, c, p, q]
                                j0 = max(0, -((q - pad) // stride))
                                j1 = min(wo, (wid - 1 - q + pad) // stride + 1)
                                for j in range(j0, j1):
                                    dx[n, c, y, j * stride - pad + q] += wv * dout[n, f, i, j]

    @njit(cache=True, parallel=True, fastmath=_FASTMATH)
    def _conv2d_bwd_weights_nb(dout, x, stride, pad, dw):
        n_batch, f_out, ho, wo = dout.shape
        c_in = x.shape[1]
        h, wid = x.shape[2], x.shape[3]
        k = dw.shape[2]
        for f in prange(f_out):
            for c in range(c_in):
                for p in range(k):
                    for q in range(k):
                        dw[f, c, p, q] = 0.0
            for n in range(n_batch):
                for i in range(ho):
                    for c in range(c_in):
                        for p in range(k):
                            y = i * stride - pad + p
                            if y < 0 or y >= h:
                                continue
                            for q in range(k):
                                j0 = max(0, -((q - pad) // stride))
                                j1 = min(wo, (wid - 1 - q + pad) // stride + 1)
                                acc = dw[f, c, p, q] - dw[f, c, p, q]
                                for j in range(j0, j1):
                                    acc += dout[n, f, i, j] * x[n, c, y, j * stride - pad + q]
                                dw[f, c, p, q] += acc

    def conv2d_forward_numba(x, w, stride, pad):
        k = w.shape[2]
        ho = (x.shape[2] + 2 * pad - k) // stride + 1
        wo = (x.shape[3] + 2 * pad - k) // stride + 1
        out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=x.dtype)
        _conv2d_forward_nb(x, w, stride, pad, out)
        return out

    def conv2d_bwd_input_numba(dout, w, stride, pad, h, wid):
        dx = np.empty((dout.shape[0], w.shape[1], h, wid), dtype=dout.dtype)
        _conv2d_bwd_input_nb(dout, w, stride, pad, dx)
        return dx

    def conv2d_bwd_weights_numba(dout, x, stride, pad, k):
        dw = np.empty((dout.shape[1], x.shape[1], k, k), dtype=dout.dtype)
        _conv2d_bwd_weights_nb(dout, x, stride, pad, dw)
        return dw


_BACKENDS = {
    "numpy": (conv2d_forward_numpy, conv2d_bwd_input_numpy, conv2d_bwd_weights_numpy),
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (
        conv2d_forward_numba,
        conv2d_bwd_input_numba,
        conv2d_bwd_weights_numba,
    )


def available_backends():
    return tuple(sorted(_BACKENDS))


def _default_backend():
    forced = os.environ.get("MARTAGAN_BACKEND", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise RuntimeError(
                f"MARTAGAN_BACKEND={forced!r} is not available; "
                f"choose one of {available_backends()}"
            )
        return forced
    # The im2col path rides BLAS sgemm and measures faster at training
    # shapes on every box tried so far (benchmarks/bench_kernels.py);
    # the JIT loops avoid the patch temporaries but can't match it.
    return "numpy"


_active = _default_backend()


def set_backend(name):
    """Switch the active kernel backend ('numba' or 'numpy')."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = name


def get_backend():
    return _active


def backend_functions(name):
    """(forward, bwd_input, bwd_weights) triple for an explicit backend."""
    return _BACKENDS[name]


def conv2d_forward(x, w, stride, pad):
    return _BACKENDS[_active][0](x, w, stride, pad)


def conv2d_bwd_input(dout, w, stride, pad, h, wid):
    return _BACKENDS[_active][1](dout, w, stride, pad, h, wid)


def conv2d_bwd_weights(dout, x, stride, pad, k):
    return _BACKENDS[_active][2](dout, x, stride, pad, k)
