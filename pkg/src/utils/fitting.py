"""
Convergence-order fits and extrapolation.

This module handles:
1. Log-log fits of an error against a small parameter
2. Polynomial extrapolation of a sequence to parameter zero
3. Richardson extrapolation for geometric parameter sequences
"""

from __future__ import annotations

from typing import Any, Dict, Sequence

import numpy as np

from utils.errors import FitFailure

__all__ = [
    "fit_order",
    "extrapolate_to_zero",
    "richardson_extrapolate",
]


def fit_order(
    params: Sequence[float], errors: Sequence[float], floor: float = 1e-300
) -> Dict[str, Any]:
    """
    Fit ``|error| ≈ C · param**order`` by least squares in log-log scale.

    Args:
        params: Positive parameter values (m, t, ...)
        errors: Error values; absolute values are used
        floor: Errors below this value are treated as exact zeros

    Returns:
        Dictionary with ``order``, ``constant``, ``points`` and ``exact``.
        ``exact`` is True when every error is below ``floor``; the order
        is then reported as infinity.

    Raises:
        FitFailure: If fewer than two points are supplied or a parameter
            is not positive.
    """
    x = np.asarray(params, dtype=float)
    y = np.abs(np.asarray(errors, dtype=float))
    if x.size < 2 or x.size != y.size:
        raise FitFailure(f"order fit needs >= 2 matching points, got {x.size}")
    if np.any(x <= 0):
        raise FitFailure("order fit needs positive parameters")

    if np.all(y <= floor):
        return {"order": float("inf"), "constant": 0.0, "points": int(x.size), "exact": True}

    mask = y > floor
    if mask.sum() < 2:
        raise FitFailure("order fit needs >= 2 nonzero errors")

    slope, intercept = np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)
    return {
        "order": float(slope),
        "constant": float(np.exp(intercept)),
        "points": int(mask.sum()),
        "exact": False,
    }


def extrapolate_to_zero(
    params: Sequence[float], values: Sequence[float], degree: int = 1
) -> Dict[str, float]:
    """
    Extrapolate ``values(param)`` to ``param = 0`` with a polynomial fit.

    Args:
        params: Parameter values
        values: Measured quantity at each parameter
        degree: Polynomial degree (1 = linear)

    Returns:
        Dictionary with the extrapolated ``value`` and the fit ``residual``
    """
    x = np.asarray(params, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.size < degree + 1:
        raise FitFailure(
            f"extrapolation of degree {degree} needs {degree + 1} points, got {x.size}"
        )
    coeffs, residuals, *_ = np.polyfit(x, y, degree, full=True)
    residual = float(np.sqrt(residuals[0] / x.size)) if residuals.size else 0.0
    return {"value": float(coeffs[-1]), "residual": residual}


def richardson_extrapolate(
    base_values: Sequence[float], p: float, r: float = 2.0
) -> float:
    """Richardson extrapolation on a sequence of approximations.

    Args:
        base_values: Approximations at parameters decreasing by ``r``
            between successive entries
        p: Order of the leading error term
        r: Parameter reduction factor (default is 2.0)

    Returns:
        The extrapolated value.

    Raises:
        FitFailure: If fewer than two values are given.
    """
    n = len(base_values)
    if n < 2:
        raise FitFailure("richardson_extrapolate requires at least two base values.")

    vals = [float(v) for v in base_values]
    for j in range(1, n):
        factor = r ** (p * j)
        for k in range(n - 1, j - 1, -1):
            vals[k] = (factor * vals[k] - vals[k - 1]) / (factor - 1.0)
    return vals[-1]
