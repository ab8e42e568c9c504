"""Central finite-difference oracle for the engine's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ops import record_kinks
from .tensor import Tensor, backward, no_grad

# 64-bit central differences at step 1e-5 carry ~1e-10 absolute round-off,
# which swamps gradient entries near 1e-6; the extended type removes that floor.
NUMERIC_DTYPE = np.longdouble
# a probe whose +-h points land on another side of a prelu kink is repeated
# at step/10 until it does not, down to this floor
MIN_STEP = 1e-9


@dataclass
class NumericGradient:
    grad: np.ndarray
    # flat index -> the smaller step that was needed to stay off a kink
    refined: dict[int, float] = field(default_factory=dict)
    # flat indices still straddling a kink at MIN_STEP
    unresolved: list[int] = field(default_factory=list)


@dataclass
class GradCheckReport:
    max_error: float
    n_checked: int
    refined: dict[int, float]
    unresolved: list[int]


def _scalar(t: Tensor, dtype) -> np.ndarray:
    return np.asarray(t.data, dtype=dtype).reshape(())


def _evaluate(f, x: np.ndarray, dtype):
    with record_kinks() as masks:
        value = _scalar(f(Tensor(x.copy())), dtype)
    return value, masks


def _same_side(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def numerical_gradient_detail(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5,
                              dtype=NUMERIC_DTYPE, indices=None) -> NumericGradient:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` elementwise, evaluated in ``dtype``.

    ``indices`` restricts the probe to those flat positions; the rest stay 0.
    """
    dt = np.dtype(dtype).type
    x = np.array(x, dtype=dtype)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    result = NumericGradient(grad=grad)
    with no_grad():
        _, base = _evaluate(f, x, dtype)
        for i in (range(flat.size) if indices is None else indices):
            i = int(i)
            orig = flat[i]
            h = step
            while True:
                flat[i] = orig + dt(h)
                fp, mp = _evaluate(f, x, dtype)
                flat[i] = orig - dt(h)
                fm, mm = _evaluate(f, x, dtype)
                flat[i] = orig
                smooth = _same_side(base, mp) and _same_side(base, mm)
                if smooth or h / 10 < MIN_STEP:
                    break
                h /= 10
            gflat[i] = (fp - fm) / (2 * dt(h))
            if h != step:
                result.refined[i] = h
            if not smooth:
                result.unresolved.append(i)
    result.grad = grad.astype(np.float64)
    return result


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5,
                       dtype=NUMERIC_DTYPE, indices=None) -> np.ndarray:
    return numerical_gradient_detail(f, x, step, dtype, indices).grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(f(xt))
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check_report(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, numeric_dtype=NUMERIC_DTYPE,
                      indices=None) -> GradCheckReport:
    """Compare backprop against central differences entry by entry.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    analytic gradient is taken at 64-bit precision; pass
    ``numeric_dtype=np.float64`` for a plain 64-bit difference quotient.
    ``indices`` (flat positions) limits the comparison to a subset of entries.
    Entries whose probe straddles a prelu kink are re-probed with a smaller
    step and listed in ``refined``.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_gradient(f, x)
    num = numerical_gradient_detail(f, x, step, numeric_dtype, indices)
    n = num.grad
    if indices is not None:
        idx = np.asarray(indices, dtype=np.intp)
        a, n = a.reshape(-1)[idx], n.reshape(-1)[idx]
    err = float(relative_error(a, n).max()) if a.size else 0.0
    return GradCheckReport(err, int(a.size), num.refined, num.unresolved)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, numeric_dtype=NUMERIC_DTYPE,
               indices=None) -> float:
    """Max elementwise relative error; see ``grad_check_report``."""
    return grad_check_report(f, x, step, numeric_dtype, indices).max_error
