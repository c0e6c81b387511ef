"""Reproducing kernels for the penalized function spaces.

Continuous covariates must already be rescaled to [0, 1]; categorical
covariates are integer level codes 0..t-1.  All three kernels broadcast
over numpy arrays.
"""

from __future__ import annotations

import numpy as np

__all__ = ["cubic_kernel", "linear_kernel", "categorical_kernel"]


def _check_unit_interval(*arrays) -> None:
    for a in arrays:
        a = np.asarray(a)
        if a.size and (np.min(a) < 0.0 or np.max(a) > 1.0):
            raise ValueError("kernel inputs must lie in [0, 1]; rescale covariates first")


def cubic_kernel(x1, x2):
    """Kernel of the second-order roughness penalty on [0, 1].

    Closed form of int_0^1 (x1 - u)_+ (x2 - u)_+ du; with s = min(x1, x2),

        x1*x2*s - (x1 + x2)*s^2/2 + s^3/3.

    The induced functions satisfy f(0) = f'(0) = 0.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    _check_unit_interval(x1, x2)
    s = np.minimum(x1, x2)
    return x1 * x2 * s - 0.5 * (x1 + x2) * s * s + s ** 3 / 3.0


def linear_kernel(x1, x2):
    """Kernel of the first-order penalty on {f : f(0) = 0}: min(x1, x2)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    _check_unit_interval(x1, x2)
    return np.minimum(x1, x2)


def categorical_kernel(tau1, tau2, levels: int):
    """Contrast kernel I[tau1 == tau2] - 1/levels on codes 0..levels-1.

    Functions in its span sum to zero over the levels, which is the ANOVA
    side condition for a categorical main effect.
    """
    if levels < 2:
        raise ValueError("categorical kernel needs at least 2 levels")
    t1 = np.asarray(tau1)
    t2 = np.asarray(tau2)
    for t in (t1, t2):
        if t.size and (np.min(t) < 0 or np.max(t) >= levels):
            raise ValueError(f"level code out of range for {levels} levels")
    return (t1 == t2).astype(float) - 1.0 / levels
