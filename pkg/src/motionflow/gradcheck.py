"""Finite-difference verification of reverse-mode gradients.

The oracle is a central difference, (f(x + h e_i) - f(x - h e_i)) / 2h, at
h = 1e-6, evaluated entry by entry with the graph recorder switched off.
Comparisons use the pointwise relative error
|a - n| / max(1, |a|, |n|), so values near zero fall back to an absolute
test and large values to a relative one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad

__all__ = ["GradCheckReport", "finite_difference", "gradcheck"]

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5


@dataclass
class GradCheckReport:
    """Outcome of one gradient comparison."""

    passed: bool
    max_error: float
    tol: float
    worst_input: int = -1
    worst_index: tuple = ()
    errors: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed

    def summary(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (
            f"gradcheck {verdict}: max relative error {self.max_error:.3e} "
            f"(tol {self.tol:.1e}) at input {self.worst_input} index {self.worst_index}"
        )


def _eval_scalar(f, arrays) -> float:
    with no_grad():
        out = f(*[Tensor(a) for a in arrays])
    if isinstance(out, Tensor):
        if out.size != 1:
            raise ValueError(f"gradcheck target must be scalar, got shape {out.shape}")
        return out.item()
    return float(out)


def finite_difference(f, arrays, h: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``arrays``, one per input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            bumped = [a.copy() for a in arrays]
            bumped[k][idx] = base[idx] + h
            hi = _eval_scalar(f, bumped)
            bumped[k][idx] = base[idx] - h
            lo = _eval_scalar(f, bumped)
            g[idx] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(f, arrays, h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against the difference oracle.

    ``f`` takes one Tensor per entry of ``arrays`` and returns a scalar Tensor.
    Returns a report; callers assert ``report.passed``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("gradcheck target must return a scalar Tensor")
    backward(out)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]
    numeric = finite_difference(f, arrays, h=h)

    max_err = 0.0
    worst_input, worst_index = -1, ()
    errors = []
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        err = np.abs(a - n) / denom
        errors.append(err)
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst_input = k
            worst_index = np.unravel_index(np.argmax(err), err.shape)
    return GradCheckReport(
        passed=max_err <= tol,
        max_error=max_err,
        tol=tol,
        worst_input=worst_input,
        worst_index=tuple(int(i) for i in worst_index),
        errors=errors,
    )
