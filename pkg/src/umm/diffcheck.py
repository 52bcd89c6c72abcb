"""Central finite differences and analytic-vs-numeric gradient comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, InvalidArgumentError


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple
    passed: bool
    step: float | None = None


def finite_difference(fn, params, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``params``.

    ``params`` may have any shape; the result has the same shape. ``coords``
    optionally restricts evaluation to a subset of flat indices (the rest are
    left at zero).
    """
    if not step > 0:
        raise InvalidArgumentError(f"step must be positive, got {step}")
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(x))
        flat[i] = orig - step
        f_minus = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise EvaluationError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def check_gradient(analytic, numeric, tolerance: float = 1e-4, step: float | None = None,
                   mask=None) -> GradCheckReport:
    """Compare gradients coordinate-wise with ``|a - n| / max(1e-8, |a| + |n|)``.

    Coordinates where ``mask`` is False are ignored (used for kink exclusion).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise InvalidArgumentError(f"length mismatch: {a.shape} vs {n.shape}")
    rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    if mask is not None:
        rel = np.where(np.asarray(mask, dtype=bool), rel, 0.0)
    if rel.size == 0:
        return GradCheckReport(0.0, (), True, step)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_rel = float(rel[worst])
    return GradCheckReport(max_rel, tuple(int(i) for i in worst), max_rel < tolerance, step)
