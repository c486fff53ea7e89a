"""Finite-difference gradient verification."""

import numpy as np

from .tensor import Graph, Tensor


def numeric_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(build_loss, params, eps=1e-6, atol=1e-6, rtol=1e-4):
    """Compare tape gradients against central differences.

    build_loss(params) must run the computation with the given list of
    Tensors and return the scalar loss Tensor; it is re-invoked for every
    perturbed coordinate, so it has to be deterministic. Returns a dict
    with per-parameter max absolute/relative error and an ``ok`` flag.
    """
    params = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True) for p in params]
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.requires_grad = True

    with Graph() as g:
        loss = build_loss(params)
        g.backward(loss)
    analytic = [p.grad.copy() for p in params]

    report = {"ok": True, "params": []}
    for idx, p in enumerate(params):
        base = p.data

        def f_at(x, _idx=idx):
            trial = [Tensor(q.data.copy()) for q in params]
            trial[_idx] = Tensor(np.asarray(x, dtype=np.float64))
            return build_loss(trial).item()

        numeric = numeric_gradient(f_at, base.copy(), eps=eps)
        a = analytic[idx]
        bad = ~np.isfinite(a)
        if bad.any():
            where = np.argwhere(bad)[0]
            report["ok"] = False
            report["params"].append(
                {
                    "index": idx,
                    "ok": False,
                    "max_abs_err": float("inf"),
                    "max_rel_err": float("inf"),
                    "note": f"non-finite analytic gradient at coordinate {tuple(where)}",
                }
            )
            continue
        abs_err = np.abs(a - numeric)
        # relative error with a floored denominator so coordinates where the
        # true gradient is ~0 are judged by absolute error instead
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(a)), 1e-8)
        rel_err = abs_err / denom
        ok = bool(np.all((rel_err <= rtol) | (abs_err <= atol)))
        worst = np.unravel_index(int(np.argmax(abs_err)), abs_err.shape) if abs_err.size else ()
        report["params"].append(
            {
                "index": idx,
                "ok": ok,
                "max_abs_err": float(abs_err.max()) if abs_err.size else 0.0,
                "max_rel_err": float(rel_err.max()) if rel_err.size else 0.0,
                "worst_coordinate": tuple(int(i) for i in worst),
            }
        )
        report["ok"] = report["ok"] and ok
    return report
