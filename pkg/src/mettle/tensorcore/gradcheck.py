"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import ComputeGraph, NumericError, Tensor, no_grad

REL_ERR_FLOOR = 1e-12


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor],
                      params: Sequence[Tensor],
                      step: float = 1e-4) -> float:
    """Max relative error between analytic gradients of f and central differences.

    f must build a scalar loss from the given parameter tensors on the active
    graph and be deterministic. The relative error denominator is
    max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    params = list(params)
    with ComputeGraph() as g:
        out = f(params)
        if not np.isfinite(out.data).all():
            raise NumericError("finite_diff_check: non-finite function value")
        # constant f: nothing reaches the loss, every analytic gradient is zero
        grads = g.backward(out) if out.requires_grad else None

    def value_at(ps) -> float:
        with no_grad():
            v = f(ps)
        val = float(np.asarray(v.data).reshape(()))
        if not np.isfinite(val):
            raise NumericError("finite_diff_check: non-finite function value")
        return val

    max_rel = 0.0
    for k, p in enumerate(params):
        gp = grads.get(p) if grads is not None else None
        analytic = gp.data if gp is not None else np.zeros(p.shape, dtype=p.dtype)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += step
            minus[i] -= step
            ps_plus = list(params)
            ps_minus = list(params)
            ps_plus[k] = Tensor(plus.reshape(p.shape), tag=p.tag, requires_grad=True)
            ps_minus[k] = Tensor(minus.reshape(p.shape), tag=p.tag, requires_grad=True)
            numeric = (value_at(ps_plus) - value_at(ps_minus)) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), REL_ERR_FLOOR)
            rel = abs(a - numeric) / denom
            if rel > max_rel:
                max_rel = rel
    return max_rel
