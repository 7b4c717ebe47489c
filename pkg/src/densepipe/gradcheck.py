"""Finite-difference verification of analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_input: list = field(default_factory=list)
    rejected: str | None = None


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(op, inputs, tolerance, step=1e-5, seed=0, kinks=None, check=None):
    """Compare ``op``'s analytic gradients against central differences.

    ``op`` maps Tensors to a Tensor.  The scalar probed is ``sum(out * R)``
    for a fixed random ``R`` so every output element contributes.  ``check``
    selects which input positions are differentiated (default: all).
    Inputs lying within ``step`` of one of the op's ``kinks`` are rejected
    rather than probed.
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    check = range(len(arrays)) if check is None else list(check)
    kinks = getattr(op, "kinks", ()) if kinks is None else kinks
    for i in check:
        for k in kinks:
            if np.any(np.abs(arrays[i] - k) <= step):
                return GradCheckReport(
                    max_rel_error=float("inf"), passed=False, tolerance=tolerance,
                    rejected=f"input {i} has values within {step:g} of nondifferentiable point {k:g}")

    tensors = [Tensor(a, requires_grad=(i in check)) for i, a in enumerate(arrays)]
    out = op(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)

    def probe():
        with no_grad():
            return float(np.sum(op(*[Tensor(a) for a in arrays]).data * proj))

    worst = 0.0
    per_input = []
    for i in check:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = probe()
            flat[j] = orig - step
            fm = probe()
            flat[j] = orig
            nflat[j] = (fp - fm) / (2 * step)
        err = float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(max_rel_error=worst, passed=worst < tolerance, tolerance=tolerance,
                           per_input=per_input)
