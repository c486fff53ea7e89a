"""Slow, obviously-correct reference implementations.

Everything here is written as plain index loops with no shared code or
tricks from the production kernels, so the two routes can disagree when
one of them is wrong. Used by the verification suite and the tests;
never on any hot path.
"""

import numpy as np


def conv2d_reference(x, w, b=None, stride=1, pad=0):
    """Direct-definition strided cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    f, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for p in range(k):
                            for q in range(k):
                                y = i * stride + p - pad
                                z = j * stride + q - pad
                                if 0 <= y < h and 0 <= z < wid:
                                    acc += x[bi, ci, y, z] * w[fi, ci, p, q]
                    out[bi, fi, i, j] = acc
            if b is not None:
                out[bi, fi] += b[fi]
    return out


def conv_transpose2d_reference(x, w, b=None, stride=1, pad=0):
    """Direct-definition transposed convolution: scatter each input pixel."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    _, f, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wid - 1) * stride - 2 * pad + k
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wid):
                    v = x[bi, ci, i, j]
                    for fi in range(f):
                        for p in range(k):
                            for q in range(k):
                                y = i * stride + p - pad
                                z = j * stride + q - pad
                                if 0 <= y < ho and 0 <= z < wo:
                                    out[bi, fi, y, z] += v * w[ci, fi, p, q]
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def matmul_reference(a, bmat):
    """Triple-loop matrix product."""
    a = np.asarray(a, dtype=np.float64)
    bmat = np.asarray(bmat, dtype=np.float64)
    n, d = a.shape
    _, m = bmat.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += a[i, t] * bmat[t, j]
            out[i, j] = acc
    return out


def max_pool2d_reference(x, window):
    """Loop-based non-overlapping max pooling."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wid = x.shape
    ho, wo = h // window, wid // window
    out = np.zeros((n, c, ho, wo))
    for bi in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    for p in range(window):
                        for q in range(window):
                            v = x[bi, ci, i * window + p, j * window + q]
                            if v > best:
                                best = v
                    out[bi, ci, i, j] = best
    return out


def adam_reference(param, grads, lr, beta1, beta2, eps):
    """Scalar-loop Adam trajectory: apply each gradient in turn, return final params.

    Bias-corrected first/second moments, eps added outside the square root.
    """
    p = np.asarray(param, dtype=np.float64).copy().reshape(-1)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / (1.0 - beta1**t)
            vhat = v[i] / (1.0 - beta2**t)
            p[i] -= lr * mhat / (np.sqrt(vhat) + eps)
    return p.reshape(np.asarray(param).shape)


def svm_objective_reference(w, b, x, y, c_reg):
    """Squared-hinge primal objective, plain loops: 0.5||w||^2 + C * sum max(0, 1-y f)^2."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    total = 0.5 * float(sum(wi * wi for wi in w))
    for i in range(x.shape[0]):
        f = float(b)
        for j in range(x.shape[1]):
            f += w[j] * x[i, j]
        margin = 1.0 - y[i] * f
        if margin > 0:
            total += c_reg * margin * margin
    return total
