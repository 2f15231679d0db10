"""Central finite-difference verification of tape adjoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import NonFiniteError, Precision, Tensor, TensorError, get_precision, precision


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    excluded: int = 0
    worst: Optional[tuple] = None
    tol: float = 1e-4
    details: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def _evaluate(f, inputs) -> float:
    out = f(*inputs)
    if out.size != 1:
        raise TensorError(f"gradient_check: f must return a scalar, got shape {out.shape}")
    v = out.item()
    if not np.isfinite(v):
        raise NonFiniteError("gradient_check: f is non-finite at a perturbed point")
    return v


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare ``backward()`` adjoints of ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Coordinates where the one-sided slopes disagree by more than
    ``kink_tol`` (relative) sit on a non-differentiable point, such as ReLU at
    0, and are excluded from the comparison and counted in ``excluded``.
    ``max_coords`` samples that many coordinates per input (seeded) for
    larger models.
    """
    if get_precision() is not Precision.DOUBLE:
        raise TensorError("gradient_check requires a double-precision context")
    for t in inputs:
        if t.dtype != np.float64:
            raise TensorError(f"gradient_check: input {t.shape} is not double precision")
        if not t.requires_grad:
            raise TensorError("gradient_check: every input must require grad")
        t.grad = None

    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    f0 = out.item()

    rng = np.random.default_rng(seed)
    worst_err, worst, checked, excluded = 0.0, None, 0, 0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = analytic[ti].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f, inputs)
            flat[i] = orig - h
            fm = _evaluate(f, inputs)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                excluded += 1
                continue
            a = float(ga[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (ti, int(i), a, num)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst_err, worst_err <= tol, checked, excluded, worst, tol)


def double_precision():
    return precision(Precision.DOUBLE)
