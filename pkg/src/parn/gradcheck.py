"""Finite-difference verification of analytic gradients.

Central differences (f(x+h) - f(x-h)) / 2h are compared elementwise against
the gradients produced by the reverse-mode tape. Relative error uses
|a - n| / max(|a|, |n|, 1e-8) so that entries that are zero on both sides
count as exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, NumericError, Tensor, backward, zero_grads

EPS_DIV = 1e-8


@dataclass
class GradReport:
    """Per-input comparison of analytic vs numeric gradients."""

    max_rel_errors: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
               h: float = 1e-5) -> GradReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must build a scalar from the current contents of ``inputs``;
    it is re-invoked for every perturbed evaluation, so the closures must
    read the input tensors afresh each call.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"grad_check: h={h} outside [1e-6, 1e-3]")

    for t in inputs:
        t.requires_grad = True
    zero_grads(inputs)

    out = fn()
    if out.size != 1:
        raise ContractError("grad_check closure must produce a scalar")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: closure produced a non-finite value")
    backward(out)
    analytic = [t.grad_or_zeros().copy() for t in inputs]

    numeric = []
    for t in inputs:
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: non-finite perturbed output")
            num[i] = (fp - fm) / (2.0 * h)
        numeric.append(num.reshape(t.data.shape))

    errs = []
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), EPS_DIV)
        errs.append(float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return GradReport(max_rel_errors=errs, analytic=analytic, numeric=numeric)
