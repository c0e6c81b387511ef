"""Exponential-family building blocks.

Each family knows its cumulant function b(eta) and the derived pieces the
penalized-likelihood solver needs: the mean b'(eta), the Newton weight
b''(eta), the working response, the deviance, and the statistic used to
slice responses when sampling basis anchors.

Canonical parameterizations:

* Gaussian        b(eta) = eta^2 / 2
* Poisson         b(eta) = exp(eta)
* Binomial        b(eta) = N * log(1 + exp(eta))   (N carried per observation)
* NegBinomial(r)  b(eta) = -r * log(1 - exp(eta)), valid only for eta < 0

The dispersion is fixed at 1 and the negative-binomial shape r is supplied
by the user, not estimated.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, xlogy

__all__ = [
    "DomainError",
    "DegenerateWeightError",
    "Family",
    "Gaussian",
    "Poisson",
    "Binomial",
    "NegativeBinomial",
    "make_family",
]

# Working weights below this are considered degenerate; the solver floors
# weights at a larger value before ever reaching this point.
WEIGHT_EPS = 1e-12

# Clamp ceiling for the negative-binomial canonical parameter (eta < 0).
NB_ETA_MAX = -1e-8


class DomainError(ValueError):
    """Canonical parameter outside the family's admissible domain."""


class DegenerateWeightError(RuntimeError):
    """Working weight too close to zero to form a working response."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


class Family:
    """Base class; concrete families implement the b-function triplet."""

    kind: str = "base"
    #: True when the negative log likelihood is quadratic in eta, so a
    #: single penalized-least-squares solve is the exact minimizer.
    quadratic: bool = False
    #: True when observations must carry a per-row total (Binomial N_i).
    needs_total: bool = False

    # -- family-specific hooks ----------------------------------------

    def _check_eta(self, eta: np.ndarray) -> None:
        """Raise DomainError if eta is outside the admissible domain."""

    def cumulant(self, eta, total=None):
        raise NotImplementedError

    def mean(self, eta, total=None):
        raise NotImplementedError

    def weight(self, eta, total=None):
        raise NotImplementedError

    def _saturated_neg_loglik(self, y, total=None):
        """min_eta {-y*eta + b(eta)} per observation, boundary limits included."""
        raise NotImplementedError

    def slicing_statistic(self, y, total=None):
        """Statistic whose range is sliced for adaptive anchor sampling."""
        return _as_array(y)

    def constant_eta(self, y, total=None) -> float:
        """MLE of the constant model; admissible Newton starting point."""
        raise NotImplementedError

    def validate_response(self, y, total=None) -> None:
        """Raise ValueError when (y, total) violate the family's support."""

    def clip_eta(self, eta):
        """Pull eta back into the admissible domain (identity if all of R)."""
        return _as_array(eta)

    # -- derived operations (shared) ----------------------------------

    def mean_and_weight(self, eta, total=None):
        """Return (b'(eta), b''(eta)); both finite, weight positive."""
        mu = self.mean(eta, total)
        w = self.weight(eta, total)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(w))):
            raise FloatingPointError(
                f"non-finite mean/weight in {self.kind} family (|eta| too large?)"
            )
        return mu, w

    def working_response(self, eta, y, total=None):
        """Newton linearization: y_tilde = eta - (b'(eta) - y) / b''(eta)."""
        mu, w = self.mean_and_weight(eta, total)
        if np.any(w < WEIGHT_EPS):
            raise DegenerateWeightError(
                f"{self.kind} working weight below {WEIGHT_EPS:g}"
            )
        y = _as_array(y)
        return eta - (mu - y) / w, w

    def neg_loglik(self, eta, y, total=None):
        """Per-observation -y*eta + b(eta)."""
        eta = _as_array(eta)
        self._check_eta(eta)
        return -_as_array(y) * eta + self.cumulant(eta, total)

    def deviance(self, eta, y, total=None) -> float:
        """2 * sum_i { l(eta_i; y_i) - l(eta_sat,i; y_i) }, >= 0."""
        terms = self.neg_loglik(eta, y, total) - self._saturated_neg_loglik(y, total)
        return float(2.0 * np.sum(terms))

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"{type(self).__name__}()"


class Gaussian(Family):
    kind = "gaussian"
    quadratic = True

    def cumulant(self, eta, total=None):
        eta = _as_array(eta)
        return 0.5 * eta * eta

    def mean(self, eta, total=None):
        return _as_array(eta)

    def weight(self, eta, total=None):
        return np.ones_like(_as_array(eta))

    def _saturated_neg_loglik(self, y, total=None):
        y = _as_array(y)
        return -0.5 * y * y

    def constant_eta(self, y, total=None) -> float:
        return float(np.mean(y))

    def validate_response(self, y, total=None) -> None:
        if not np.all(np.isfinite(_as_array(y))):
            raise ValueError("gaussian response must be finite")


class Poisson(Family):
    kind = "poisson"

    def cumulant(self, eta, total=None):
        return np.exp(_as_array(eta))

    def mean(self, eta, total=None):
        return np.exp(_as_array(eta))

    def weight(self, eta, total=None):
        return np.exp(_as_array(eta))

    def _saturated_neg_loglik(self, y, total=None):
        # eta_sat = log y; the y = 0 boundary gives lim_{eta->-inf} = 0.
        y = _as_array(y)
        return -xlogy(y, y) + y

    def constant_eta(self, y, total=None) -> float:
        return float(np.log(max(np.mean(y), 1e-8)))

    def validate_response(self, y, total=None) -> None:
        y = _as_array(y)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("poisson response must be a nonnegative integer")


class Binomial(Family):
    """Binomial counts with per-observation totals N_i."""

    kind = "binomial"
    needs_total = True

    @staticmethod
    def _totals(total) -> np.ndarray:
        if total is None:
            raise ValueError("binomial family requires per-observation totals")
        return _as_array(total)

    def cumulant(self, eta, total=None):
        n = self._totals(total)
        # log(1 + e^eta) via logaddexp: stable for large |eta|.
        return n * np.logaddexp(0.0, _as_array(eta))

    def mean(self, eta, total=None):
        return self._totals(total) * expit(_as_array(eta))

    def weight(self, eta, total=None):
        eta = _as_array(eta)
        return self._totals(total) * expit(eta) * expit(-eta)

    def _saturated_neg_loglik(self, y, total=None):
        y = _as_array(y)
        n = self._totals(total)
        # -y*log(p) - (n-y)*log(1-p) at p = y/n; 0*log(0) -> 0 at boundaries.
        return -xlogy(y, y) - xlogy(n - y, n - y) + xlogy(n, n)

    def slicing_statistic(self, y, total=None):
        return _as_array(y) / self._totals(total)

    def constant_eta(self, y, total=None) -> float:
        p = np.sum(y) / np.sum(self._totals(total))
        p = min(max(p, 1e-8), 1.0 - 1e-8)
        return float(np.log(p / (1.0 - p)))

    def validate_response(self, y, total=None) -> None:
        y = _as_array(y)
        n = self._totals(total)
        if np.any(n < 1) or np.any(n != np.round(n)):
            raise ValueError("binomial totals must be integers >= 1")
        if np.any(y < 0) or np.any(y > n) or np.any(y != np.round(y)):
            raise ValueError("binomial response must satisfy 0 <= y <= total")


class NegativeBinomial(Family):
    """Negative binomial with fixed target-success count r; eta = log p < 0."""

    kind = "negbinomial"

    def __init__(self, shape: float = 3.0):
        if shape <= 0:
            raise ValueError("negative binomial shape must be positive")
        self.shape = float(shape)

    def _check_eta(self, eta: np.ndarray) -> None:
        if np.any(eta >= 0):
            raise DomainError("negbinomial canonical parameter requires eta < 0")

    def cumulant(self, eta, total=None):
        eta = _as_array(eta)
        self._check_eta(eta)
        # -r*log(1 - e^eta); -expm1 keeps precision for eta near 0-.
        return -self.shape * np.log(-np.expm1(eta))

    def mean(self, eta, total=None):
        eta = _as_array(eta)
        self._check_eta(eta)
        # r * e^eta / (1 - e^eta) = r / expm1(-eta)
        return self.shape / np.expm1(-eta)

    def weight(self, eta, total=None):
        mu = self.mean(eta)
        return mu * (mu + self.shape) / self.shape

    def _saturated_neg_loglik(self, y, total=None):
        # eta_sat = log(y / (y + r)); y = 0 boundary limit is 0.
        y = _as_array(y)
        r = self.shape
        return -xlogy(y, y) + xlogy(y + r, y + r) - xlogy(r, r)

    def constant_eta(self, y, total=None) -> float:
        mu = max(np.mean(y), 1e-8)
        return float(np.log(mu / (mu + self.shape)))

    def clip_eta(self, eta):
        return np.minimum(_as_array(eta), NB_ETA_MAX)

    def validate_response(self, y, total=None) -> None:
        y = _as_array(y)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("negbinomial response must be a nonnegative integer")

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"NegativeBinomial(shape={self.shape!r})"


_FAMILIES = {
    "gaussian": Gaussian,
    "normal": Gaussian,
    "poisson": Poisson,
    "binomial": Binomial,
    "negbinomial": NegativeBinomial,
    "negative_binomial": NegativeBinomial,
    "nb": NegativeBinomial,
}


def make_family(kind: str, shape: float = 3.0) -> Family:
    """Resolve a family by name; `shape` is only used by the negative binomial."""
    key = kind.strip().lower().replace("-", "_")
    if key not in _FAMILIES:
        raise ValueError(f"unknown family {kind!r}; expected one of "
                         f"{sorted(set(_FAMILIES))}")
    cls = _FAMILIES[key]
    return cls(shape) if cls is NegativeBinomial else cls()
