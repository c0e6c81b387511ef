"""Model assessment: quasi-R2, Kullback-Leibler projection, isoform rates.

The KL projection "tests" ANOVA components: project the fitted eta onto
the sub-model without them (unpenalized minimization of the KL
divergence) and report

    rho = KL(eta_hat, eta_tilde) / KL(eta_hat, eta_const),

the fraction of fitted structure lost by the restriction.  Small rho
(default threshold 0.03) supports dropping the components.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .families import Family
from .fitting import FitResult, NewtonControl, PwlsSystem
from .model import Dataset

__all__ = [
    "ProjectionReport",
    "quasi_r2",
    "kl_divergence",
    "kl_project",
    "isoform_mle",
]

DEFAULT_RHO_THRESHOLD = 0.03


def quasi_r2(fit: FitResult, dataset: Dataset, family: Family) -> float:
    """1 - deviance(fit) / deviance(constant model)."""
    eta_null = np.full(dataset.n, family.constant_eta(dataset.y, dataset.total))
    d0 = family.deviance(eta_null, dataset.y, dataset.total)
    if d0 <= 0.0:
        raise ValueError("null deviance is zero (constant response); "
                         "quasi-R2 is undefined")
    return 1.0 - fit.deviance / d0


def kl_divergence(family: Family, eta_hat, eta, total=None) -> float:
    """(1/n) sum{ mu_hat_i (eta_hat_i - eta_i) - b_i(eta_hat_i) + b_i(eta_i) }.

    Bregman divergence of the cumulant, hence >= 0 with equality iff the
    two parameter vectors agree pointwise; binomial totals are absorbed
    into b_i.
    """
    eta_hat = np.asarray(eta_hat, dtype=float)
    eta = np.asarray(eta, dtype=float)
    mu_hat = family.mean(eta_hat, total)
    vals = (mu_hat * (eta_hat - eta) - family.cumulant(eta_hat, total)
            + family.cumulant(eta, total))
    return float(np.mean(vals))


@dataclass
class ProjectionReport:
    """Outcome of projecting a fit onto a reduced component set."""

    dropped: tuple[str, ...]
    retained: tuple[str, ...]
    kl_full_to_reduced: float
    kl_full_to_constant: float
    rho: float
    threshold: float
    removable: bool | None       # None when the projection failed
    converged: bool
    decomposition_residual: float

    def to_dict(self) -> dict:
        return {
            "dropped": list(self.dropped),
            "retained": list(self.retained),
            "kl_full_to_reduced": self.kl_full_to_reduced,
            "kl_full_to_constant": self.kl_full_to_constant,
            "rho": self.rho,
            "threshold": self.threshold,
            "removable": self.removable,
            "converged": self.converged,
            "decomposition_residual": self.decomposition_residual,
        }


def _project_eta(family: Family, mu_hat, total, S, R, Q, control: NewtonControl):
    """Unpenalized Newton minimization of the KL objective over span(S, R).

    Equivalent to maximum likelihood with the fitted means as responses:
    the objective is (1/n) sum{-mu_hat_i eta_i + b_i(eta_i)} up to a
    constant.
    """
    n = mu_hat.shape[0]
    mu_hat = np.asarray(mu_hat, dtype=float)

    def objective(eta_eval):
        return float(np.mean(-mu_hat * eta_eval
                             + family.cumulant(eta_eval, total)))

    eta = np.full(n, family.constant_eta(mu_hat, total))
    d = np.zeros(S.shape[1])
    d[0] = eta[0]
    c = np.zeros(R.shape[1])
    obj = objective(family.clip_eta(eta))
    converged = False
    for _ in range(control.max_iter):
        eta_eval = family.clip_eta(eta)
        mu, w = family.mean_and_weight(eta_eval, total)
        w = np.maximum(w, control.weight_floor)
        y_tilde = eta_eval - (mu - mu_hat) / w
        with warnings.catch_warnings():
            # anchors are sampled with replacement, so the unpenalized
            # projection system is rank deficient by construction
            warnings.filterwarnings("ignore", message="rank-deficient")
            sys = PwlsSystem(S, R, Q, w, n, 0.0)
            d_new, c_new, _ = sys.coefficients(w, y_tilde)
        eta_new = S @ d_new + R @ c_new

        alpha, accepted, obj_try = 1.0, False, np.inf
        for _ in range(control.max_halvings + 1):
            eta_try = eta + alpha * (eta_new - eta)
            obj_try = objective(family.clip_eta(eta_try))
            if np.isfinite(obj_try) and obj_try <= obj + 1e-14 * (1 + abs(obj)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = abs(obj_try - obj) <= control.tol * (1 + abs(obj))
            break
        eta = eta + alpha * (eta_new - eta)
        d = d + alpha * (d_new - d)
        c = c + alpha * (c_new - c)
        delta = abs(obj_try - obj)
        obj = obj_try
        if delta <= control.tol * (1 + abs(obj)):
            converged = True
            break
    return eta, converged


def kl_project(fit: FitResult, drop, dataset: Dataset, family: Family,
               threshold: float = DEFAULT_RHO_THRESHOLD,
               control: NewtonControl | None = None) -> ProjectionReport:
    """Project the fitted eta onto the model without the named components.

    The fitted anchors and theta values are kept; only the dropped
    components' kernel terms and null-basis columns are removed.  The
    projection itself is unpenalized (it has no lambda).
    """
    drop = tuple(drop)
    control = control or NewtonControl(tol=1e-10, max_iter=100)
    spec = fit.spec
    unknown = set(drop) - set(spec.components)
    if unknown:
        raise KeyError(f"unknown components: {sorted(unknown)}")
    retained = tuple(c for c in spec.components if c not in drop)

    cols = fit.rescaler.transform(dataset.columns)
    eta_hat = spec.null_matrix(cols) @ fit.d
    if spec.n_theta:
        eta_hat = eta_hat + spec.kernel_matrix(cols, fit.anchors,
                                               fit.thetas) @ fit.c
    eta_hat_eval = family.clip_eta(eta_hat)
    mu_hat = family.mean(eta_hat_eval, dataset.total)
    total = dataset.total

    # constant projection: matched mean on the constant model
    eta_const = np.full(dataset.n, family.constant_eta(mu_hat, total))
    kl_const = kl_divergence(family, eta_hat_eval, family.clip_eta(eta_const),
                             total)

    if not drop:
        return ProjectionReport(drop, retained, 0.0, kl_const, 0.0, threshold,
                                True, True, 0.0)

    reduced = spec.restrict(drop)
    if not retained or (reduced.n_theta == 0 and reduced.null_dim == 1):
        # nothing but the constant survives
        eta_tilde, converged = eta_const, True
    else:
        S = reduced.null_matrix(cols)
        if reduced.n_theta:
            theta_red = spec.restrict_theta(fit.thetas, drop)
            anchors = fit.anchors
            R = reduced.kernel_matrix(cols, anchors, theta_red)
            Q = reduced.kernel_matrix(anchors, anchors, theta_red)
            Q = 0.5 * (Q + Q.T)
        else:
            R = np.zeros((dataset.n, 0))
            Q = np.zeros((0, 0))
        eta_tilde, converged = _project_eta(family, mu_hat, total, S, R, Q,
                                            control)

    if not converged:
        warnings.warn("KL projection did not converge; no verdict")
        return ProjectionReport(drop, retained, float("nan"), kl_const,
                                float("nan"), threshold, None, False,
                                float("nan"))

    eta_tilde_eval = family.clip_eta(eta_tilde)
    kl_reduced = kl_divergence(family, eta_hat_eval, eta_tilde_eval, total)
    kl_tail = kl_divergence(family, eta_tilde_eval, family.clip_eta(eta_const),
                            total)
    residual = abs(kl_const - kl_reduced - kl_tail) / max(kl_const, 1e-300)
    rho = kl_reduced / kl_const if kl_const > 0 else 0.0
    return ProjectionReport(drop, retained, kl_reduced, kl_const, rho,
                            threshold, bool(rho <= threshold), True, residual)


def isoform_mle(exon_lengths, exon_counts, indicator, tol: float = 1e-8,
                max_iter: int = 200_000) -> np.ndarray:
    """Poisson rates for isoform abundances from per-exon read counts.

    The exon-i count is Poisson with mean l_i * sum_j C_ij theta_j;
    theta >= 0 is found by multiplicative (EM) updates

        theta_j <- theta_j * [sum_i C_ij z_i / s_i] / [sum_i C_ij l_i],

    which never decrease the likelihood, iterated until the KKT
    residual (|grad| on active coordinates, positive part elsewhere)
    drops below `tol`.
    """
    lengths = np.asarray(exon_lengths, dtype=float)
    z = np.asarray(exon_counts, dtype=float)
    C = np.asarray(indicator, dtype=float)
    if np.any(lengths <= 0):
        raise ValueError("exon lengths must be positive")
    if np.any(z < 0) or np.any(z != np.round(z)):
        raise ValueError("exon counts must be nonnegative integers")
    if C.ndim != 2 or C.shape[0] != lengths.shape[0]:
        raise ValueError("indicator must be exons x isoforms")
    if np.any(C.sum(axis=0) == 0):
        raise ValueError("indicator has an all-zero column")

    _, first = np.unique(C.T, axis=0, return_index=True)
    if first.shape[0] < C.shape[1]:
        warnings.warn("identical indicator columns: abundances are only "
                      "identified up to their sum (reported split equally)")

    k = C.shape[1]
    denom = C.T @ lengths  # sum_i C_ij l_i, constant across iterations
    theta = np.full(k, z.sum() / max(lengths.sum(), 1e-300) / k + 1e-12)

    def kkt(grad):
        active = theta > 1e-12 * max(theta.max(), 1.0)
        res = np.where(active, np.abs(grad), np.maximum(grad, 0.0))
        return float(np.max(res))

    for _ in range(max_iter):
        s = C @ theta
        s = np.maximum(s, 1e-300)
        ratio = C.T @ (z / s)
        grad = ratio - denom
        if kkt(grad) <= tol:
            break
        theta = theta * ratio / denom
    else:
        warnings.warn("isoform EM reached the iteration cap before the "
                      "gradient tolerance")
    return theta


def isoform_loglik(exon_lengths, exon_counts, indicator, theta) -> float:
    """Poisson log likelihood of abundances (constant terms dropped)."""
    lengths = np.asarray(exon_lengths, dtype=float)
    z = np.asarray(exon_counts, dtype=float)
    mu = lengths * (np.asarray(indicator, dtype=float) @ np.asarray(theta))
    with np.errstate(divide="ignore"):
        logmu = np.where(mu > 0, np.log(np.maximum(mu, 1e-300)), -np.inf)
    vals = np.where(z > 0, z * logmu, 0.0) - mu
    return float(np.sum(vals))
