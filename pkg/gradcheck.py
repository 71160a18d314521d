"""
Finite-difference helpers for checking analytic gradients.
"""

import logging
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


def finite_difference_gradient(func: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function with respect to every
    entry of x. x is not modified.
    """
    x0 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    grad_flat = grad.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + step
        f_plus = func(x0)
        flat[j] = original - step
        f_minus = func(x0)
        flat[j] = original
        grad_flat[j] = (f_plus - f_minus) / (2 * step)
    logger.debug(f"Finite differences over {flat.size} entries (step {step})")
    return grad


def directional_derivative(func: Callable[[np.ndarray], float], x, direction, step: float = 1e-5) -> float:
    x0 = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return (func(x0 + step * d) - func(x0 - step * d)) / (2 * step)


def max_relative_error(analytic, numeric) -> float:
    """Largest absolute deviation, relative to the numeric gradient's scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale
