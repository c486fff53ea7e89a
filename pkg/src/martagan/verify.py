"""Self-verification suite: dual-route checks with measured error bounds.

Every check pits the production code against an independent route — a
direct-loop oracle, central finite differences, a scalar reference, or
a closed-form identity — and records the measured error next to its
threshold. ``run_verification`` returns the full table; the CLI's
``verify`` subcommand renders it and sets the exit code.

The ``fault`` argument routes through the deliberate-perturbation hook
in the op layer, proving the suite actually catches a broken gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import classify, reference, train
from .autodiff import Graph, Tensor, grad_check, kernels, ops


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float
    passed: bool
    detail: str = ""


def _result(name, err, threshold, detail=""):
    err = float(err)
    return CheckResult(name, err, threshold, bool(err <= threshold), detail)


def _random_conv_shapes(rng, count):
    shapes = []
    for _ in range(count):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        f = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        k = int(rng.integers(1, 3)) * stride  # keep k divisible by stride
        pad = int(rng.integers(0, 2))
        h = int(rng.integers(max(2, k - 2 * pad + 1), 9))
        shapes.append((n, c, h, f, k, stride, pad))
    return shapes


def check_conv_oracle(seed=0, count=25):
    rng = np.random.default_rng([seed, 50])
    worst = 0.0
    for n, c, h, f, k, stride, pad in _random_conv_shapes(rng, count):
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((f, c, k, k))
        b = rng.standard_normal(f)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        want = reference.conv2d_reference(x, w, b, stride=stride, pad=pad)
        worst = max(worst, float(np.abs(got - want).max()))
    return _result("oracle/conv2d", worst, 1e-6, f"{count} random shapes")


def check_conv_transpose_oracle(seed=0, count=25):
    rng = np.random.default_rng([seed, 51])
    worst = 0.0
    for n, c, h, f, k, stride, pad in _random_conv_shapes(rng, count):
        if (h - 1) * stride - 2 * pad + k < 1:
            continue
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((c, f, k, k))
        b = rng.standard_normal(f)
        got = ops.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        want = reference.conv_transpose2d_reference(x, w, b, stride=stride, pad=pad)
        worst = max(worst, float(np.abs(got - want).max()))
    return _result("oracle/conv_transpose2d", worst, 1e-6, f"{count} random shapes")


def check_dense_oracle(seed=0, count=10):
    rng = np.random.default_rng([seed, 52])
    worst = 0.0
    for _ in range(count):
        n, d, m = (int(rng.integers(1, 7)) for _ in range(3))
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, m))
        got = ops.dense(Tensor(x), Tensor(w)).data
        want = reference.matmul_reference(x, w)
        worst = max(worst, float(np.abs(got - want).max()))
    return _result("oracle/dense", worst, 1e-9, f"{count} random shapes")


def check_adjoint(seed=0, count=10):
    """<conv2d(u, W), v> == <u, conv_transpose2d(v, W)> for random u, v.

    Conv weights (F, C, k, k) read as transposed-conv weights map the
    F-channel output space back to the C-channel input space. Input
    sides are snapped so the conv consumes them exactly (no floor), so
    the round trip reproduces u's shape.
    """
    rng = np.random.default_rng([seed, 53])
    worst = 0.0
    for n, c, h, f, k, stride, pad in _random_conv_shapes(rng, count):
        h -= (h + 2 * pad - k) % stride
        if h + 2 * pad < k:
            continue
        u = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((f, c, k, k))
        fwd = ops.conv2d(Tensor(u), Tensor(w), stride=stride, pad=pad).data
        v = rng.standard_normal(fwd.shape)
        back = ops.conv_transpose2d(Tensor(v), Tensor(w), stride=stride, pad=pad).data
        lhs = float((fwd * v).sum())
        rhs = float((u * back).sum())
        scale = max(1.0, abs(lhs), abs(rhs))
        worst = max(worst, abs(lhs - rhs) / scale)
    return _result("identity/adjoint", worst, 1e-6, "inner-product identity")


def check_even_coverage():
    """k=4, s=2 transposed conv with constant input/kernel: flat interior."""
    x = np.full((1, 1, 6, 6), 0.37)
    w = np.full((1, 1, 4, 4), 0.21)
    out = ops.conv_transpose2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    interior = out[0, 0, 1:-1, 1:-1]
    err = float(np.abs(interior - interior.flat[0]).max())
    return _result("identity/even_coverage", err, 0.0, "interior exactly constant")


def check_divisibility_rejection():
    x, w = Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3)))
    try:
        ops.conv_transpose2d(x, w, stride=2, pad=1)
    except ValueError:
        return _result("identity/checkerboard_rejected", 0.0, 0.0, "k=3,s=2 raises")
    return CheckResult("identity/checkerboard_rejected", 1.0, 0.0, False, "k=3,s=2 accepted")


def _grad_cases(seed):
    rng = np.random.default_rng([seed, 54])

    def r(*shape):
        return rng.standard_normal(shape)

    def away_from_kinks(*shape):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)

    def pool_input(*shape):
        # values pairwise separated by 0.1 so the argmax is unique and
        # stays put under the finite-difference perturbation
        size = int(np.prod(shape))
        return (rng.permutation(size) * 0.1 - 0.05 * size).reshape(shape)

    cases = []
    cases.append(("conv2d", 1e-4,
                  lambda p: ops.mean_all(ops.square(ops.conv2d(p[0], p[1], p[2], stride=2, pad=1))),
                  [r(2, 2, 6, 6), r(3, 2, 4, 4), r(3)]))
    cases.append(("conv_transpose2d", 1e-4,
                  lambda p: ops.mean_all(ops.square(ops.conv_transpose2d(p[0], p[1], p[2], stride=2, pad=1))),
                  [r(2, 3, 4, 4), r(3, 2, 4, 4), r(2)]))
    cases.append(("dense", 1e-6,
                  lambda p: ops.mean_all(ops.square(ops.dense(p[0], p[1], p[2]))),
                  [r(3, 5), r(5, 4), r(4)]))
    cases.append(("max_pool2d", 1e-6,
                  lambda p: ops.mean_all(ops.square(ops.max_pool2d(p[0], 2))),
                  [pool_input(2, 2, 4, 4)]))

    # mean(square(bn(x))) alone is x-invariant (normalization fixes the
    # batch moments), so compare against a fixed random target instead
    bn_target = r(4, 3, 3, 3)

    def bn_loss(training):
        def f(p):
            st = ops.BatchNormState(3)
            st.gamma, st.beta = p[1], p[2]
            st.running_mean = np.array([0.1, -0.2, 0.3])
            st.running_var = np.array([1.1, 0.9, 1.3])
            out = ops.batch_norm2d(p[0], st, training=training)
            return ops.mean_all(ops.square(ops.sub(out, Tensor(bn_target))))
        return f

    cases.append(("batch_norm2d_train", 1e-4, bn_loss(True), [r(4, 3, 3, 3), 1 + 0.1 * r(3), 0.1 * r(3)]))
    cases.append(("batch_norm2d_infer", 1e-4, bn_loss(False), [r(4, 3, 3, 3), 1 + 0.1 * r(3), 0.1 * r(3)]))
    for name, fn in [("relu", ops.relu), ("leaky_relu", ops.leaky_relu),
                     ("tanh", ops.tanh), ("sigmoid", ops.sigmoid), ("log_sigmoid", ops.log_sigmoid)]:
        cases.append((name, 1e-4,
                      (lambda f: lambda p: ops.mean_all(ops.square(f(p[0]))))(fn),
                      [away_from_kinks(3, 4)]))
    cases.append(("d_loss", 1e-4,
                  lambda p: train.d_loss(p[0], p[1]), [r(6), r(6)]))
    cases.append(("g_perceptual", 1e-4,
                  lambda p: train.g_perceptual_loss(p[0]), [r(6)]))
    cases.append(("g_feature_match", 1e-4,
                  lambda p: train.g_feature_match_loss(p[0], np.full(4, 0.3)), [r(5, 4)]))
    cases.append(("fused_head", 1e-4,
                  lambda p: ops.mean_all(ops.square(ops.flatten(ops.concat_channels(
                      [ops.max_pool2d(p[0], 2), p[1]])))),
                  [pool_input(2, 2, 8, 8), r(2, 3, 4, 4)]))
    return cases


def check_gradients(seeds=5):
    worst = {}
    tols = {}
    for seed in range(seeds):
        for name, tol, loss_fn, params in _grad_cases(seed):
            rep = grad_check(loss_fn, params, eps=1e-4, rtol=tol, atol=tol * 1e-2)
            err = max(p["max_rel_err"] for p in rep["params"])
            worst[name] = max(worst.get(name, 0.0), err)
            tols[name] = tol
    return [
        _result(f"grad/{name}", worst[name], tols[name], f"{seeds} seeds, central diff")
        for name in worst
    ]


def check_tanh_analytic(seed=0):
    """loss = mean(tanh(w*x)): hand chain rule vs tape."""
    rng = np.random.default_rng([seed, 55])
    x = rng.standard_normal(16)
    w = Tensor(np.array(0.7), requires_grad=True)
    with Graph() as g:
        # w*x as a (16,1) @ (1,1) product of the scalar weight
        prod = ops.dense(Tensor(x.reshape(16, 1)), ops.reshape(w, (1, 1)))
        loss = ops.mean_all(ops.tanh(prod))
        g.backward(loss)
    analytic = float(np.mean(x * (1.0 - np.tanh(0.7 * x) ** 2)))
    err = abs(float(w.grad) - analytic)
    return _result("grad/tanh_analytic", err, 1e-9, "hand chain rule")


def check_loss_identities():
    results = []
    zeros = Tensor(np.zeros(8))
    v = train.d_loss(zeros, Tensor(np.zeros(8))).item()
    results.append(_result("loss/d_at_half", abs(v - 2 * math.log(2)), 1e-9, "2*ln 2"))
    feats = np.random.default_rng(0).standard_normal((6, 10))
    fm = train.g_feature_match_loss(Tensor(feats), feats.mean(axis=0)).item()
    results.append(_result("loss/fm_identical_zero", abs(fm), 0.0, "matched batches"))
    lr = np.random.default_rng(1).standard_normal(8)
    perc = train.g_perceptual_loss(Tensor(lr))
    fm2 = train.g_feature_match_loss(Tensor(feats), np.zeros(10))
    fin = train.g_final_loss(perc, fm2)
    add_err = abs(fin.item() - (perc.item() + fm2.item()))
    results.append(_result("loss/final_additivity", add_err, 1e-6, "final = perceptual + fm"))
    return results


def check_adam(seed=0):
    rng = np.random.default_rng([seed, 56])
    p0 = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(100)]
    p = Tensor(p0.copy(), requires_grad=True)
    opt = train.Adam({"p": p}, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    for g in grads:
        p.grad = g
        opt.step()
    want = reference.adam_reference(p0, grads, 1e-3, 0.9, 0.999, 1e-8)
    err = float(np.abs(p.data - want).max())
    results = [_result("adam/reference_100_steps", err, 1e-12, "scalar-loop oracle")]

    q = Tensor(np.zeros(4), requires_grad=True)
    opt2 = train.Adam({"q": q}, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    q.grad = np.ones(4)
    opt2.step()
    step_mag = float(np.abs(q.data).max())
    results.append(_result("adam/first_step_magnitude", abs(step_mag - 1e-3), 1e-6, "~lr for unit grad"))
    return results


def check_svm(seed=0):
    results = []
    # symmetric points x=+-1, one per side, C=1: stationarity of
    # 0.5 w^2 + 2C(1-w)^2 gives w = 4C/(1+4C) = 0.8, b = 0 by symmetry
    x = np.array([[1.0], [-1.0]])
    labels = np.array([1, 0])
    m = classify.train_svm(x, labels, c_reg=1.0, tol=1e-14, max_epochs=2000)
    analytic = 0.8
    w1 = float(m.weights[1, 0])  # binary problem for class 1: y = sign(x)
    err = abs(w1 - analytic) + float(np.abs(m.biases).max())
    results.append(_result("svm/analytic_margin", err, 1e-3, f"w={w1:.6f} vs {analytic:.6f}"))
    mono = 0.0
    for h in m.objective_histories:
        h = np.array(h)
        if h.size > 1:
            mono = max(mono, float(np.maximum(0.0, np.diff(h)).max()))
    results.append(_result("svm/objective_monotone", mono, 0.0, "non-increasing"))

    rng = np.random.default_rng([seed, 57])
    xs = np.vstack([rng.normal(1.5, 0.3, (20, 3)), rng.normal(-1.5, 0.3, (20, 3))])
    ys = np.concatenate([np.ones(20, dtype=int), np.zeros(20, dtype=int)])
    ms = classify.train_svm(xs, ys)
    acc = float(np.mean(classify.predict(ms, xs) == ys))
    results.append(_result("svm/separable_train_acc", 1.0 - acc, 0.0, "100% on separable data"))
    return results


def check_batch_norm_statistics(seed=0):
    rng = np.random.default_rng([seed, 58])
    x = rng.standard_normal((8, 3, 6, 6)) * 2.0 + 0.5
    st = ops.BatchNormState(3)
    out = ops.batch_norm2d(Tensor(x), st, training=True).data
    mean_err = float(np.abs(out.mean(axis=(0, 2, 3))).max())
    var_err = float(np.abs(out.var(axis=(0, 2, 3)) - 1.0).max())
    return [
        _result("bn/normalized_mean", mean_err, 1e-5, "gamma=1, beta=0"),
        _result("bn/normalized_var", var_err, 1e-3, "gamma=1, beta=0"),
    ]


def check_backend_equivalence(seed=0, count=10):
    backends = kernels.available_backends()
    if len(backends) < 2:
        return [_result("kernels/backend_equivalence", 0.0, 1e-6, f"single backend: {backends}")]
    rng = np.random.default_rng([seed, 59])
    worst = 0.0
    saved = kernels.get_backend()
    try:
        for n, c, h, f, k, stride, pad in _random_conv_shapes(rng, count):
            x = rng.standard_normal((n, c, h, h))
            w = rng.standard_normal((f, c, k, k))
            ho = (h + 2 * pad - k) // stride + 1
            g = rng.standard_normal((n, f, ho, ho))
            outs = []
            for b in backends:
                kernels.set_backend(b)
                fwd = kernels.conv2d_forward(x, w, stride, pad)
                dx = kernels.conv2d_bwd_input(g, w, stride, pad, h, h)
                dw = kernels.conv2d_bwd_weights(g, x, stride, pad, k)
                outs.append((fwd, dx, dw))
            for a, bb in zip(outs[0], outs[1]):
                worst = max(worst, float(np.abs(a - bb).max()))
    finally:
        kernels.set_backend(saved)
    return [_result("kernels/backend_equivalence", worst, 1e-6, " vs ".join(backends))]


def run_verification(seeds=5, fault=None):
    """Full dual-route check table. ``fault`` perturbs the named op's backward."""
    ops.set_backward_fault(fault)
    try:
        results = []
        results.append(check_conv_oracle())
        results.append(check_conv_transpose_oracle())
        results.append(check_dense_oracle())
        results.append(check_adjoint())
        results.append(check_even_coverage())
        results.append(check_divisibility_rejection())
        results.extend(check_gradients(seeds=seeds))
        results.append(check_tanh_analytic())
        results.extend(check_loss_identities())
        results.extend(check_adam())
        results.extend(check_svm())
        results.extend(check_batch_norm_statistics())
        results.extend(check_backend_equivalence())
        return results
    finally:
        ops.set_backward_fault(None)


def all_passed(results):
    return all(r.passed for r in results)


def format_report(results):
    name_w = max(len(r.name) for r in results)
    lines = [f"{'check':<{name_w}}  {'max error':>12}  {'threshold':>10}  status  detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<{name_w}}  {r.max_error:>12.3e}  {r.threshold:>10.0e}  {status:<6}  {r.detail}"
        )
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {len(results) - n_fail} passed, {n_fail} failed")
    return "\n".join(lines)
