"""Penalized-likelihood fitting in the effective model space.

The estimate is eta(x) = sum_nu d_nu phi_nu(x) + sum_j c_j R(x*_j, x),
computed by a Newton loop whose inner step minimizes the penalized
weighted least squares

    (Y~ - S d - R c)' W (Y~ - S d - R c) + n*lambda * c' Q c

over the sampled anchors x*_j.  Smoothing parameters (lambda and the
per-term multipliers theta) are tuned by minimizing the generalized
approximate cross-validation score

    GACV = -(1/n) sum{Y_i eta_i - b(eta_i)}
           + tr(A_w W^-1) / (n - tr A_w) * (1/n) sum Y_i (Y_i - mu_i),

with the smoothing matrix A_w = X_w H^+ X_w' evaluated at the weights
reached on Newton convergence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpstrf

from .families import Family, make_family
from .model import Dataset, ModelSpec, Rescaler
from .sampling import EffectiveBasis

__all__ = [
    "ConfigurationError",
    "TuningError",
    "NewtonControl",
    "SearchConfig",
    "FitResult",
    "DesignBlocks",
    "assemble",
    "pwls_solve",
    "smoothing_traces",
    "newton_fit",
    "gacv",
    "tune",
    "fit_model",
    "predict",
]


class ConfigurationError(ValueError):
    """Inconsistent fit configuration (e.g. n* not above the null dimension)."""


class TuningError(RuntimeError):
    """No smoothing-parameter candidate produced a converged fit."""

    def __init__(self, message: str, trajectory: list[dict]):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class NewtonControl:
    """Newton-loop constants (defaults; nothing in the method fixes them)."""

    tol: float = 1e-7          # relative penalized-likelihood change
    max_iter: int = 30
    max_halvings: int = 15
    weight_floor: float = 1e-8


@dataclass
class SearchConfig:
    """Outer smoothing-parameter search policy.

    theta_mode:
      "auto"        fixed theta when there is a single multiplier
                    (lambda absorbs its scale), Nelder-Mead otherwise;
      "fixed"       tune lambda only, theta = theta_init (default ones);
      "heuristic"   theta equalizes per-term Gram traces, then tune
                    lambda only - cheap, used by the batch pipelines;
      "nelder_mead" joint simplex search on (log lambda, log theta).
    """

    log10_lambda: tuple[float, float] = (-8.0, 2.0)
    lambda_grid: int = 9
    golden_iters: int = 12
    theta_mode: str = "auto"
    theta_init: np.ndarray | None = None
    log10_theta: tuple[float, float] = (-6.0, 6.0)
    nm_starts: int = 2
    nm_maxfev: int = 150


# ---------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------


# Condition estimate (squared pivot ratio) above which the pivoted
# Cholesky route loses too much accuracy and the solver switches to an
# SVD of the stacked least-squares matrix.
_CHOL_KAPPA_MAX = 1e9


class PwlsSystem:
    """Normal equations of the weighted penalized objective at fixed weights.

    Blocks are S_w = W^(1/2) S and R_w = W^(1/2) R; the system matrix is

        H = [S_w'S_w  S_w'R_w; R_w'S_w  R_w'R_w + n*lambda*Q]

    (the symmetric transpose of the upper-right block sits lower-left,
    consistent with the quadratic objective).  H is factored by pivoted
    Cholesky with backward/forward substitution.  When the pivots reveal
    rank deficiency (duplicate anchors) or severe ill-conditioning, the
    solver falls back to the Moore-Penrose solution, computed from an
    SVD of the stacked matrix [X_w; B] with B'B = n*lambda*Q so that the
    condition number is not squared.
    """

    def __init__(self, S, R, Q, w, n, lam):
        self.m = S.shape[1]
        self.n = n
        self.X = np.hstack([S, R])
        sw = np.sqrt(w)
        self.Xw = self.X * sw[:, None]
        H = self.Xw.T @ self.Xw
        nstar = R.shape[1]
        if lam != 0.0 and nstar:
            H[self.m:, self.m:] += (n * lam) * Q
        self.H = H
        p = H.shape[0]

        self._svd = None
        cf, piv, rank, info = dpstrf(H, lower=1)
        if info < 0:  # pragma: no cover - LAPACK usage error
            raise RuntimeError(f"dpstrf failed with info={info}")
        diag = np.abs(np.diag(cf)[:rank])
        well_conditioned = (
            rank == p and diag.size
            and (diag.max() / max(diag.min(), 1e-300)) ** 2 <= _CHOL_KAPPA_MAX
        )
        if well_conditioned:
            pivi = piv - 1
            L = np.tril(cf)
            inv = np.empty_like(pivi)
            inv[pivi] = np.arange(p)

            def solve(B):
                Bp = np.asarray(B)[pivi]
                Z = solve_triangular(L, Bp, lower=True)
                Z = solve_triangular(L.T, Z, lower=False)
                return Z[inv]

            self.solve = solve
            self.rank = p
        else:
            # stacked penalty rows: pivoted-Cholesky square root of Q,
            # which keeps duplicate anchors exactly duplicated
            if lam != 0.0 and nstar:
                cfq, pivq, rankq, infoq = dpstrf(Q, lower=1)
                if infoq < 0:  # pragma: no cover - LAPACK usage error
                    raise RuntimeError(f"dpstrf failed with info={infoq}")
                Lq = np.tril(cfq)[:, :rankq]
                Bq = np.zeros((rankq, nstar))
                Bq[:, pivq - 1] = Lq.T
                Bfull = np.zeros((rankq, p))
                Bfull[:, self.m:] = np.sqrt(n * lam) * Bq
                M = np.vstack([self.Xw, Bfull])
            else:
                M = self.Xw
            U, s, Vt = np.linalg.svd(M, full_matrices=False)
            cutoff = s[0] * max(M.shape) * np.finfo(float).eps if s.size else 0.0
            r = int(np.sum(s > cutoff))
            self.rank = r
            if r < p:
                warnings.warn("rank-deficient penalized system; "
                              "using the Moore-Penrose solution")
            Vr = Vt[:r].T / s[:r]
            self._svd = Vr  # p x r, columns scaled by 1/sigma

            def solve(B):
                return Vr @ (Vr.T @ np.asarray(B))

            self.solve = solve

    def coefficients(self, w, y_tilde):
        """Solve for (d, c); also report the relative normal-equation residual."""
        rhs = self.X.T @ (w * y_tilde)
        coef = self.solve(rhs)
        num = np.linalg.norm(self.H @ coef - rhs)
        den = max(np.linalg.norm(rhs), 1e-30)
        return coef[: self.m], coef[self.m:], num / den

    def traces(self):
        """Exact tr(A_w) and tr(A_w W^-1) via solves against the blocks."""
        if self._svd is not None:
            # tr(H+ G) = ||X V_r S_r^-1||_F^2 for G = X'X
            tr_aw = float(np.sum((self.Xw @ self._svd) ** 2))
            tr_winv = float(np.sum((self.X @ self._svd) ** 2))
            return tr_aw, tr_winv
        tr_aw = float(np.trace(self.solve(self.Xw.T @ self.Xw)))
        tr_winv = float(np.trace(self.solve(self.X.T @ self.X)))
        return tr_aw, tr_winv


class DesignBlocks:
    """Cached design pieces for one (dataset, model, anchor set).

    Kernel Gram blocks are stored per theta group so candidate theta
    vectors combine by a single tensor contraction during tuning.
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec, basis: EffectiveBasis,
                 rescaler: Rescaler | None = None):
        cols = (rescaler.transform(dataset.columns) if rescaler is not None
                else dataset.columns)
        anchor_cols = {k: np.asarray(v)[basis.anchor_indices]
                       for k, v in cols.items()}
        self.spec = spec
        self.S = spec.null_matrix(cols)
        if spec.n_theta == 0:
            # purely parametric model: no representers at all
            self.R_stack = np.zeros((0, dataset.n, 0))
            self.Q_stack = np.zeros((0, 0, 0))
            anchor_cols = {k: v[:0] for k, v in anchor_cols.items()}
        else:
            self.R_stack = spec.gram_stack(cols, anchor_cols)
            Q_stack = spec.gram_stack(anchor_cols, anchor_cols)
            self.Q_stack = 0.5 * (Q_stack + np.transpose(Q_stack, (0, 2, 1)))
        self.anchor_cols = anchor_cols
        self.n = dataset.n

    def R(self, theta) -> np.ndarray:
        return np.tensordot(np.asarray(theta, dtype=float), self.R_stack, axes=1)

    def Q(self, theta) -> np.ndarray:
        return np.tensordot(np.asarray(theta, dtype=float), self.Q_stack, axes=1)


def assemble(dataset: Dataset, spec: ModelSpec, basis: EffectiveBasis,
             thetas, rescaler: Rescaler | None = None):
    """Design matrices (S, R, Q) at the given smoothing multipliers.

    S is n x m null-basis evaluations, R is n x n* with entries
    R(x_i, x*_j), Q is the n* x n* anchor Gram R(x*_j, x*_k).
    """
    thetas = np.asarray(thetas, dtype=float)
    if np.any(thetas <= 0):
        raise ConfigurationError("smoothing multipliers theta must be positive")
    blocks = DesignBlocks(dataset, spec, basis, rescaler)
    S, R, Q = blocks.S, blocks.R(thetas), blocks.Q(thetas)
    for name, mat in (("S", S), ("R", R), ("Q", Q)):
        if not np.all(np.isfinite(mat)):
            raise FloatingPointError(f"non-finite entries in {name}")
    return S, R, Q


def pwls_solve(S, R, Q, w, y_tilde, n, lam):
    """Minimize the penalized weighted least squares objective; returns (d, c)."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ConfigurationError("weights must be positive (floor them upstream)")
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    sys = PwlsSystem(S, R, Q, w, n, lam)
    if sys.m + R.shape[1] > n and sys.rank < sys.m + R.shape[1]:
        warnings.warn("overparameterized system solved in the least-norm sense")
    d, c, _ = sys.coefficients(w, np.asarray(y_tilde, dtype=float))
    return d, c


def smoothing_traces(S, R, Q, w, n, lam):
    """tr(A_w) and tr(A_w W^-1) for the smoothing matrix at these weights."""
    sys = PwlsSystem(S, R, Q, np.asarray(w, dtype=float), n, lam)
    tr_aw, tr_winv = sys.traces()
    if not (np.isfinite(tr_aw) and np.isfinite(tr_winv)):
        raise FloatingPointError("non-finite smoothing-matrix trace")
    return tr_aw, tr_winv


# ---------------------------------------------------------------------
# Newton loop
# ---------------------------------------------------------------------


def _penalized_likelihood(family, eta_eval, y, total, lam, c, Q) -> float:
    return float(np.mean(family.neg_loglik(eta_eval, y, total))
                 + 0.5 * lam * (c @ Q @ c))


def _gacv_score(family, y, total, eta_eval, mu, tr_aw, tr_winv, n) -> float:
    if tr_aw >= n - 1e-6:
        return float("inf")
    score = float(np.mean(family.neg_loglik(eta_eval, y, total)))
    score += tr_winv / (n - tr_aw) * float(np.mean(y * (y - mu)))
    return score


@dataclass
class FitResult:
    """Converged fit: coefficients, tuned parameters, and diagnostics."""

    d: np.ndarray
    c: np.ndarray
    lam: float
    thetas: np.ndarray
    trace_aw: float
    trace_aw_winv: float
    deviance: float
    gacv: float
    newton_iterations: int
    converged: bool
    basis: EffectiveBasis
    spec: ModelSpec
    rescaler: Rescaler
    family_kind: str
    family_shape: float | None
    anchors: dict[str, np.ndarray]
    eta: np.ndarray | None = None
    mu: np.ndarray | None = None
    weights: np.ndarray | None = None
    pl_trajectory: list[float] = field(default_factory=list)
    n_clamped: int = 0
    pwls_residual: float = 0.0
    search_trajectory: list[dict] = field(default_factory=list)

    def family(self) -> Family:
        return make_family(self.family_kind, self.family_shape or 3.0)

    def to_dict(self) -> dict:
        """JSON-ready summary (per-observation vectors go to fitted.csv)."""
        return {
            "model": self.spec.to_config(),
            "family": {"kind": self.family_kind, "shape": self.family_shape},
            "coefficients": {"d": self.d.tolist(), "c": self.c.tolist()},
            "lambda": float(self.lam),
            "thetas": np.asarray(self.thetas, dtype=float).tolist(),
            "theta_labels": list(self.spec.theta_labels),
            "trace_aw": float(self.trace_aw),
            "trace_aw_winv": float(self.trace_aw_winv),
            "deviance": float(self.deviance),
            "gacv": float(self.gacv),
            "newton_iterations": int(self.newton_iterations),
            "converged": bool(self.converged),
            "n_clamped": int(self.n_clamped),
            "pwls_residual": float(self.pwls_residual),
            "pl_trajectory": [float(v) for v in self.pl_trajectory],
            "rescale": self.rescaler.to_dict(),
            "anchors": {k: np.asarray(v).tolist() for k, v in self.anchors.items()},
            "basis": self.basis.to_dict(),
            "search_trajectory": self.search_trajectory,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        from .model import model_from_config

        spec = model_from_config(d["model"])
        return cls(
            d=np.asarray(d["coefficients"]["d"], dtype=float),
            c=np.asarray(d["coefficients"]["c"], dtype=float),
            lam=float(d["lambda"]),
            thetas=np.asarray(d["thetas"], dtype=float),
            trace_aw=float(d["trace_aw"]),
            trace_aw_winv=float(d["trace_aw_winv"]),
            deviance=float(d["deviance"]),
            gacv=float(d["gacv"]),
            newton_iterations=int(d["newton_iterations"]),
            converged=bool(d["converged"]),
            basis=EffectiveBasis.from_dict(d["basis"]),
            spec=spec,
            rescaler=Rescaler.from_dict(d["rescale"]),
            family_kind=d["family"]["kind"],
            family_shape=d["family"].get("shape"),
            anchors={k: np.asarray(v) for k, v in d["anchors"].items()},
            n_clamped=int(d.get("n_clamped", 0)),
            pwls_residual=float(d.get("pwls_residual", 0.0)),
            pl_trajectory=list(d.get("pl_trajectory", [])),
            search_trajectory=list(d.get("search_trajectory", [])),
        )


def _newton_core(blocks: DesignBlocks, family: Family, y, total, lam, theta,
                 control: NewtonControl, start=None):
    S = blocks.S
    theta = np.asarray(theta, dtype=float)
    R = blocks.R(theta)
    Q = blocks.Q(theta)
    n, m = S.shape
    if blocks.spec.n_theta > 0 and R.shape[1] < m + 1:
        raise ConfigurationError(
            f"effective dimension n*={R.shape[1]} must exceed the "
            f"null dimension m={m}")

    if start is not None:
        # warm start from a neighbouring smoothing parameter; the
        # penalized likelihood is convex in (d, c), so the minimizer is
        # unchanged and only the iteration count drops
        d, c = start[0].copy(), start[1].copy()
    else:
        d = np.zeros(m)
        d[0] = family.constant_eta(y, total)  # null basis starts with constant
        c = np.zeros(R.shape[1])
    eta = S @ d + R @ c
    pl = _penalized_likelihood(family, family.clip_eta(eta), y, total, lam, c, Q)
    trajectory = [pl]
    converged = False
    iterations = 0
    n_clamped = 0
    worst_residual = 0.0
    final_sys: PwlsSystem | None = None

    for it in range(1, control.max_iter + 1):
        eta_eval = family.clip_eta(eta)
        n_clamped += int(np.sum(eta_eval != eta))
        mu, w = family.mean_and_weight(eta_eval, total)
        w = np.maximum(w, control.weight_floor)
        y_tilde = eta_eval - (mu - np.asarray(y, dtype=float)) / w
        sys = PwlsSystem(S, R, Q, w, n, lam)
        d_new, c_new, resid = sys.coefficients(w, y_tilde)
        worst_residual = max(worst_residual, resid)

        # step halving: accept only steps that do not increase (2.1)
        alpha, accepted, pl_try = 1.0, False, np.inf
        for _ in range(control.max_halvings + 1):
            eta_try = eta + alpha * (S @ d_new + R @ c_new - eta)
            c_try = c + alpha * (c_new - c)
            d_try = d + alpha * (d_new - d)
            pl_try = _penalized_likelihood(
                family, family.clip_eta(eta_try), y, total, lam, c_try, Q)
            if np.isfinite(pl_try) and pl_try <= pl + 1e-12 * (1.0 + abs(pl)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = abs(pl_try - pl) <= control.tol * (1.0 + abs(pl))
            break
        iterations = it
        delta = abs(pl_try - pl)
        eta, c, d, pl = eta + alpha * (S @ d_new + R @ c_new - eta), c_try, d_try, pl_try
        trajectory.append(pl)
        final_sys = sys
        if family.quadratic or delta <= control.tol * (1.0 + abs(pl)):
            converged = True
            break

    eta = S @ d + R @ c
    eta_eval = family.clip_eta(eta)
    final_clamped = int(np.sum(eta_eval != eta))
    mu, w = family.mean_and_weight(eta_eval, total)
    w = np.maximum(w, control.weight_floor)
    sys = PwlsSystem(S, R, Q, w, n, lam)
    tr_aw, tr_winv = sys.traces()
    deviance = family.deviance(eta_eval, y, total)
    score = _gacv_score(family, np.asarray(y, dtype=float), total,
                        eta_eval, mu, tr_aw, tr_winv, n)
    if final_clamped:
        # the solution sits on the domain boundary; its means there are
        # meaningless, so keep it out of the smoothing-parameter search
        score = float("inf")
    return {
        "d": d, "c": c, "eta": eta, "mu": mu, "w": w,
        "trace_aw": tr_aw, "trace_aw_winv": tr_winv,
        "deviance": deviance, "gacv": score,
        "iterations": iterations, "converged": converged,
        "trajectory": trajectory, "n_clamped": n_clamped,
        "residual": worst_residual,
    }


def _result_from_core(core, lam, theta, basis, spec, rescaler, family,
                      blocks) -> FitResult:
    return FitResult(
        d=core["d"], c=core["c"], lam=float(lam),
        thetas=np.asarray(theta, dtype=float),
        trace_aw=core["trace_aw"], trace_aw_winv=core["trace_aw_winv"],
        deviance=core["deviance"], gacv=core["gacv"],
        newton_iterations=core["iterations"], converged=core["converged"],
        basis=basis, spec=spec,
        rescaler=rescaler if rescaler is not None else Rescaler({}),
        family_kind=family.kind,
        family_shape=getattr(family, "shape", None),
        anchors=blocks.anchor_cols,
        eta=core["eta"], mu=core["mu"], weights=core["w"],
        pl_trajectory=core["trajectory"], n_clamped=core["n_clamped"],
        pwls_residual=core["residual"],
    )


def newton_fit(dataset: Dataset, family: Family, spec: ModelSpec,
               basis: EffectiveBasis, lam: float, thetas,
               rescaler: Rescaler | None = None,
               control: NewtonControl | None = None) -> FitResult:
    """Fit at fixed smoothing parameters.

    Covariates must already live on [0, 1] unless a rescaler is given.
    The returned result reports convergence honestly; it is not an error
    to hit the iteration cap.
    """
    family.validate_response(dataset.y, dataset.total)
    control = control or NewtonControl()
    blocks = DesignBlocks(dataset, spec, basis, rescaler)
    core = _newton_core(blocks, family, dataset.y, dataset.total, lam,
                        thetas, control)
    return _result_from_core(core, lam, thetas, basis, spec, rescaler,
                             family, blocks)


def gacv(fit: FitResult, dataset: Dataset, family: Family) -> float:
    """GACV score of a converged fit (A_w and W at the converged weights)."""
    eta_eval = family.clip_eta(fit.eta)
    return _gacv_score(family, dataset.y, dataset.total, eta_eval, fit.mu,
                       fit.trace_aw, fit.trace_aw_winv, dataset.n)


# ---------------------------------------------------------------------
# smoothing-parameter search
# ---------------------------------------------------------------------


def _theta_heuristic(blocks: DesignBlocks) -> np.ndarray:
    """Equalize the anchor-Gram traces across theta groups."""
    tr = np.array([float(np.trace(Q)) for Q in blocks.Q_stack])
    theta = np.where(tr > 0, 1.0 / np.maximum(tr, 1e-300), 1.0)
    active = tr > 0
    if np.any(active):
        theta[active] /= np.exp(np.mean(np.log(theta[active])))
    return theta


def _golden_lambda(evaluate, bounds, grid_size, iters):
    """Coarse grid then golden-section refinement on log10(lambda).

    Returns (best log-lambda, best core).  A flat score profile resolves
    to the largest lambda evaluated (maximal smoothing).
    """
    lo, hi = bounds
    grid = np.linspace(lo, hi, grid_size)
    evals: dict[float, dict] = {}

    def f(x):
        if x not in evals:
            evals[x] = evaluate(x)
        return evals[x]["gacv"]

    for g in grid:
        f(float(g))
    best = min(evals, key=lambda x: (evals[x]["gacv"], x))
    step = (hi - lo) / (grid_size - 1)
    a, b = max(lo, best - step), min(hi, best + step)

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)

    finite = {x: e for x, e in evals.items() if np.isfinite(e["gacv"])}
    if finite:
        scores = [e["gacv"] for e in finite.values()]
        if max(scores) - min(scores) <= 1e-10 * (1.0 + abs(min(scores))):
            x = max(finite)  # flat profile: maximal smoothing
            return x, finite[x]
    best = min(evals, key=lambda x: (evals[x]["gacv"], x))
    return best, evals[best]


def tune(dataset: Dataset, family: Family, spec: ModelSpec,
         basis: EffectiveBasis, search: SearchConfig | None = None,
         control: NewtonControl | None = None,
         rescaler: Rescaler | None = None) -> FitResult:
    """Pick (lambda, theta) minimizing GACV; returns the winning fit.

    Deterministic given the search configuration; the evaluated
    trajectory is recorded on the result.
    """
    family.validate_response(dataset.y, dataset.total)
    search = search or SearchConfig()
    control = control or NewtonControl()
    blocks = DesignBlocks(dataset, spec, basis, rescaler)
    y, total = dataset.y, dataset.total
    trajectory: list[dict] = []

    # degenerate data: a constant response makes the GACV profile flat,
    # so return maximal smoothing directly
    stat = family.slicing_statistic(y, total)
    if np.ptp(y) == 0.0 or np.ptp(stat) == 0.0:
        lam = 10.0 ** search.log10_lambda[1]
        theta = (np.asarray(search.theta_init, dtype=float)
                 if search.theta_init is not None else np.ones(spec.n_theta))
        core = _newton_core(blocks, family, y, total, lam, theta, control)
        fit = _result_from_core(core, lam, theta, basis, spec, rescaler,
                                family, blocks)
        fit.search_trajectory = [{
            "lambda": float(lam), "theta": theta.tolist(),
            "gacv": float(core["gacv"]), "converged": bool(core["converged"]),
            "note": "constant response; maximal smoothing",
        }]
        return fit

    warm: dict[str, tuple] = {}

    def run(lam, theta):
        core = _newton_core(blocks, family, y, total, lam, theta, control,
                            start=warm.get("coef"))
        if core["converged"]:
            warm["coef"] = (core["d"], core["c"])
        trajectory.append({
            "lambda": float(lam),
            "theta": np.asarray(theta, dtype=float).tolist(),
            "gacv": float(core["gacv"]),
            "converged": bool(core["converged"]),
        })
        return core

    mode = search.theta_mode
    if mode == "auto":
        mode = "fixed" if spec.n_theta <= 1 else "nelder_mead"

    if spec.n_theta == 0:
        theta0 = np.zeros(0)
        mode = "fixed_theta_only"

    if mode in ("fixed", "fixed_theta_only"):
        theta0 = (np.asarray(search.theta_init, dtype=float)
                  if search.theta_init is not None else np.ones(spec.n_theta))
    elif mode == "heuristic":
        theta0 = _theta_heuristic(blocks)
    elif mode == "nelder_mead":
        theta0 = None
    else:
        raise ConfigurationError(f"unknown theta_mode {search.theta_mode!r}")

    if theta0 is not None:
        def evaluate(loglam):
            return run(10.0 ** loglam, theta0)

        loglam, core = _golden_lambda(evaluate, search.log10_lambda,
                                      search.lambda_grid, search.golden_iters)
        lam = 10.0 ** loglam
        if not core["converged"]:
            core, lam = _best_converged(trajectory, run)
        theta = theta0
    else:
        core, lam, theta = _tune_nelder_mead(run, blocks, spec, search)

    if core is None:
        raise TuningError("no smoothing-parameter candidate converged", trajectory)

    fit = _result_from_core(core, lam, theta, basis, spec, rescaler, family,
                            blocks)
    fit.search_trajectory = trajectory
    return fit


def _best_converged(trajectory, run):
    converged = [e for e in trajectory if e["converged"]]
    if not converged:
        raise TuningError("no smoothing-parameter candidate converged",
                          trajectory)
    best = min(converged, key=lambda e: (e["gacv"], e["lambda"]))
    core = run(best["lambda"], np.asarray(best["theta"]))
    return core, best["lambda"]


def _tune_nelder_mead(run, blocks, spec, search):
    from scipy.optimize import minimize

    lo_l, hi_l = search.log10_lambda
    lo_t, hi_t = search.log10_theta
    k = spec.n_theta

    cache: dict[tuple, dict] = {}

    def objective(params):
        params = np.concatenate([
            np.clip(params[:1], lo_l, hi_l),
            np.clip(params[1:], lo_t, hi_t),
        ])
        key = tuple(np.round(params, 12))
        if key not in cache:
            core = run(10.0 ** params[0], 10.0 ** params[1:])
            cache[key] = core
        core = cache[key]
        score = core["gacv"]
        if not core["converged"] or not np.isfinite(score):
            return 1e10
        return score

    center = 0.5 * (lo_l + hi_l)
    starts = [
        np.concatenate([[center], np.log10(_theta_heuristic(blocks))]),
        np.concatenate([[center], np.zeros(k)]),
    ][: max(search.nm_starts, 1)]

    best_x, best_f = None, np.inf
    for x0 in starts:
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxfev": search.nm_maxfev,
                                "xatol": 1e-3, "fatol": 1e-10})
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    if best_x is None or best_f >= 1e10:
        raise TuningError("no smoothing-parameter candidate converged",
                          [])
    theta = 10.0 ** np.clip(best_x[1:], lo_t, hi_t)

    # polish lambda at the winning theta
    def evaluate(loglam):
        return run(10.0 ** loglam, theta)

    loglam, core = _golden_lambda(evaluate, search.log10_lambda,
                                  search.lambda_grid, search.golden_iters)
    if not core["converged"]:
        start_lam = float(np.clip(best_x[0], lo_l, hi_l))
        core = run(10.0 ** start_lam, theta)
        loglam = start_lam
    return core, 10.0 ** loglam, theta


# ---------------------------------------------------------------------
# prediction and the high-level pipeline
# ---------------------------------------------------------------------


def predict(fit: FitResult, columns: Mapping[str, np.ndarray],
            total=None):
    """Evaluate the fitted expansion at new points; returns (eta, mu).

    Continuous covariates are rescaled with the training map and clamped
    (with a warning) when outside the training range.  For binomial fits
    mu is per-trial probability unless totals are supplied.
    """
    cols = fit.rescaler.transform(columns)
    S_new = fit.spec.null_matrix(cols)
    R_new = fit.spec.kernel_matrix(cols, fit.anchors, fit.thetas)
    eta = S_new @ fit.d + R_new @ fit.c
    family = fit.family()
    if family.needs_total and total is None:
        total = np.ones(eta.shape[0])
    mu = family.mean(family.clip_eta(eta), total)
    return eta, mu


def fit_model(dataset: Dataset, family: Family, spec: ModelSpec, *,
              sampler: str = "adaptive", nstar: int | None = None,
              nstar_rule: str = "cubic", nstar_multiplier: float = 10.0,
              n_slices: int | None = None, seed: int = 0, spawn_key=(),
              lam: float | None = None, thetas=None,
              search: SearchConfig | None = None,
              control: NewtonControl | None = None) -> FitResult:
    """End-to-end fit: rescale, sample anchors, tune (or fit at fixed lambda).

    n_slices=None applies Scott's rule; nstar=None applies the dimension
    rule round(multiplier * n^(2/9 or 2/5)).
    """
    from .sampling import adaptive_sample, default_nstar, uniform_sample

    family.validate_response(dataset.y, dataset.total)
    rescaler = Rescaler.fit(dataset.columns, spec.covariates)
    if nstar is None:
        nstar = default_nstar(dataset.n, nstar_rule, nstar_multiplier,
                              null_dim=spec.null_dim)
    if spec.n_theta > 0 and nstar < spec.null_dim + 1:
        raise ConfigurationError(
            f"n*={nstar} must exceed the null dimension m={spec.null_dim}")
    if sampler == "adaptive":
        basis = adaptive_sample(dataset, family, n_slices=n_slices,
                                nstar=nstar, seed=seed, spawn_key=spawn_key)
    elif sampler == "uniform":
        basis = uniform_sample(dataset, nstar, seed=seed, spawn_key=spawn_key)
    else:
        raise ConfigurationError(f"unknown sampler {sampler!r}")

    if lam is not None:
        theta = (np.ones(spec.n_theta) if thetas is None
                 else np.asarray(thetas, dtype=float))
        return newton_fit(dataset, family, spec, basis, lam, theta,
                          rescaler=rescaler, control=control)
    return tune(dataset, family, spec, basis, search=search, control=control,
                rescaler=rescaler)
