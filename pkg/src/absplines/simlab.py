"""Simulation test bed comparing adaptive vs uniform anchor sampling.

Three pinned scenarios: a bivariate step surface driving a negative
binomial response, and two nonparanormal-density surfaces driving
Poisson (d=2) and binomial (d=4) responses.  Each experiment fits every
replicate's dataset twice - once per anchor-sampling method - and
records the sum-of-squares error of the recovered mean-scale parameter
against the stored truth.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .families import Family, make_family
from .fitting import SearchConfig, tune
from .model import Covariate, Dataset, ModelSpec, Rescaler, build_model
from .sampling import adaptive_sample, scott_slice_count, uniform_sample

__all__ = [
    "BLOCKS_KNOTS",
    "BLOCKS_HEIGHTS",
    "Scenario",
    "SCENARIOS",
    "blocks1",
    "blocks2",
    "nonparanormal_density",
    "generate",
    "mse",
    "fitted_parameter",
    "run_experiment",
    "write_experiment_csv",
    "experiment_summary",
]

# Pinned step-function table (knot positions and jump heights); the
# surface is right-continuous and zero left of the first knot.
BLOCKS_KNOTS = np.array(
    [0.10, 0.13, 0.15, 0.23, 0.25, 0.40, 0.44, 0.65, 0.76, 0.78, 0.81])
BLOCKS_HEIGHTS = np.array(
    [4.0, -5.0, 3.0, -4.0, 5.0, -4.2, 2.1, 4.3, -3.1, 2.1, -4.2])


def blocks1(x) -> np.ndarray:
    """Univariate step surface: sum of height * (1 + sign(x - knot)) / 2."""
    x = np.asarray(x, dtype=float)
    steps = (x[..., None] >= BLOCKS_KNOTS).astype(float)
    return steps @ BLOCKS_HEIGHTS


def blocks2(x1, x2) -> np.ndarray:
    """Bivariate extension: constant in the second coordinate."""
    out = blocks1(x1) + 0.0 * np.asarray(x2, dtype=float)
    return out


def _tridiagonal_sigma(d: int) -> np.ndarray:
    sigma = np.eye(d)
    idx = np.arange(d - 1)
    sigma[idx, idx + 1] = 0.5
    sigma[idx + 1, idx] = 0.5
    return sigma


def nonparanormal_density(x, alpha, sigma: np.ndarray | None = None):
    """Gaussian-copula density with power transforms f_j = a_j sign(x)|x|^a_j.

    x: (..., d) points; alpha: (d,) positive shape parameters.  sigma
    defaults to the tridiagonal matrix with unit diagonal and 0.5 off
    diagonals.  |x_j| below 1e-12 is perturbed to 1e-12 so the |f'_j|
    factor stays finite for alpha_j < 1 (a measure-zero guard).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    d = alpha.shape[0]
    if np.any(alpha <= 0):
        raise ValueError("shape parameters must be positive")
    if x.shape[-1] != d:
        raise ValueError("point dimension does not match alpha")
    if sigma is None:
        sigma = _tridiagonal_sigma(d)
    ax = np.abs(x)
    ax = np.where(ax < 1e-12, 1e-12, ax)
    f = alpha * np.sign(x) * ax ** alpha
    fprime = alpha**2 * ax ** (alpha - 1.0)
    sol = np.linalg.solve(sigma, f.T).T
    quad = np.sum(f * sol, axis=-1)
    det = np.linalg.det(sigma)
    dens = ((2.0 * np.pi) ** (-d / 2.0) / np.sqrt(det)
            * np.exp(-0.5 * quad) * np.prod(fprime, axis=-1))
    if not np.all(np.isfinite(dens)):
        raise FloatingPointError("non-finite density value")
    return dens if dens.shape != (1,) else float(dens[0])


@dataclass(frozen=True)
class Scenario:
    """One pinned simulation setup."""

    name: str
    family_kind: str
    d: int
    box: tuple[float, float]
    n: int = 1600
    reps: int = 100
    nstar_rule: str = "cubic"
    nstar_multiplier: float = 10.0
    nb_shape: float = 3.0
    binom_total: int = 50
    interactions: bool = True          # two-way terms (d = 2 only)
    theta_mode: str = "heuristic"

    def family(self) -> Family:
        return make_family(self.family_kind, self.nb_shape)

    def model(self) -> ModelSpec:
        covs = [Covariate(f"x{j+1}", "continuous") for j in range(self.d)]
        comps = [(c.name,) for c in covs]
        if self.interactions and self.d == 2:
            comps.append(("x1", "x2"))
        return build_model(covs, comps, share_theta=True)


SCENARIOS = {
    "blocks_negbin": Scenario("blocks_negbin", "negbinomial", d=2,
                              box=(0.0, 1.0)),
    "copula2_poisson": Scenario("copula2_poisson", "poisson", d=2,
                                box=(-1.0, 1.0)),
    "copula4_binomial": Scenario("copula4_binomial", "binomial", d=4,
                                 box=(-1.0, 1.0), interactions=False),
}

_COPULA_ALPHA = {2: np.array([2.0, 3.0]), 4: np.array([0.1, 0.1, 0.1, 0.1])}


def _truth_parameter(scenario: Scenario, pts: np.ndarray) -> np.ndarray:
    if scenario.name == "blocks_negbin":
        return (blocks2(pts[:, 0], pts[:, 1]) + 2.5) / 8.0
    alpha = _COPULA_ALPHA[scenario.d]
    dens = np.asarray(nonparanormal_density(pts, alpha))
    if scenario.name == "copula2_poisson":
        # 1 + 2 (2 pi)^{d/2} |Sigma|^{1/2} p(x): the density's normalizing
        # constant cancels, leaving 1 + 2 exp(-f'S^-1f/2) prod|f'_j|
        d = scenario.d
        det = np.linalg.det(_tridiagonal_sigma(d))
        return 1.0 + 2.0 * (2.0 * np.pi) ** (d / 2.0) * np.sqrt(det) * dens
    if scenario.name == "copula4_binomial":
        return expit(dens)
    raise ValueError(f"unknown scenario {scenario.name!r}")


def generate(scenario: Scenario, seed) -> tuple[Dataset, np.ndarray]:
    """Uniform covariates on the scenario box, response from its family.

    Returns (dataset, truth) where truth is the mean-scale parameter
    (success probability or Poisson mean) at each design point.
    """
    rng = np.random.default_rng(seed)
    lo, hi = scenario.box
    pts = rng.uniform(lo, hi, size=(scenario.n, scenario.d))
    truth = _truth_parameter(scenario, pts)
    columns = {f"x{j+1}": pts[:, j] for j in range(scenario.d)}
    total = None
    if scenario.family_kind == "negbinomial":
        if np.any((truth <= 0) | (truth >= 1)):
            raise FloatingPointError("success probability left (0, 1)")
        # the family counts successes with probability `truth`; numpy's
        # sampler counts failures, so pass the complement
        y = rng.negative_binomial(scenario.nb_shape, 1.0 - truth,
                                  scenario.n).astype(float)
    elif scenario.family_kind == "poisson":
        y = rng.poisson(truth).astype(float)
    elif scenario.family_kind == "binomial":
        total = np.full(scenario.n, float(scenario.binom_total))
        y = rng.binomial(scenario.binom_total, truth).astype(float)
    else:
        raise ValueError(scenario.family_kind)
    return Dataset(columns, y, total=total), truth


def mse(param_hat, truth) -> float:
    """Sum of squared parameter errors (a sum, not a mean)."""
    param_hat = np.asarray(param_hat, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if param_hat.shape != truth.shape:
        raise ValueError("parameter vectors must have matching length")
    return float(np.sum((param_hat - truth) ** 2))


def fitted_parameter(family: Family, eta) -> np.ndarray:
    """Map fitted eta to the truth scale used by the error metric."""
    eta = family.clip_eta(np.asarray(eta, dtype=float))
    if family.kind == "negbinomial":
        return np.exp(eta)          # canonical eta = log p
    if family.kind == "poisson":
        return np.exp(eta)
    if family.kind == "binomial":
        return expit(eta)
    return eta


def _fit_one(method, dataset, family, spec, nstar, n_slices, seed_entropy,
             spawn_key, theta_mode):
    if method == "ABS":
        basis = adaptive_sample(dataset, family, n_slices=n_slices,
                                nstar=nstar, seed=seed_entropy,
                                spawn_key=spawn_key)
    else:
        basis = uniform_sample(dataset, nstar, seed=seed_entropy,
                               spawn_key=spawn_key)
    rescaler = Rescaler.fit(dataset.columns, spec.covariates)
    fit = tune(dataset, family, spec, basis,
               search=SearchConfig(theta_mode=theta_mode),
               rescaler=rescaler)
    return fit, basis


def _run_replicate(scenario: Scenario, seed: int, rep: int, methods):
    family = scenario.family()
    spec = scenario.model()
    dataset, truth = generate(
        scenario, np.random.SeedSequence(seed, spawn_key=(rep, 0)))
    stats = family.slicing_statistic(dataset.y, dataset.total)
    n_slices = scott_slice_count(stats)
    nstar = _scenario_nstar(scenario)
    rows = []
    for im, method in enumerate(methods):
        row = {"replicate": rep, "method": method, "nstar": nstar,
               "K": n_slices if method == "ABS" else 1, "seed": seed}
        try:
            fit, _ = _fit_one(method, dataset, family, spec, nstar, n_slices,
                              seed, (rep, 1 + im), scenario.theta_mode)
            row["mse"] = mse(fitted_parameter(family, fit.eta), truth)
            row["converged"] = bool(fit.converged)
        except Exception as exc:  # fit failure: record and move on
            row["mse"] = float("nan")
            row["converged"] = False
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def _scenario_nstar(scenario: Scenario) -> int:
    from .sampling import default_nstar

    return default_nstar(scenario.n, scenario.nstar_rule,
                         scenario.nstar_multiplier)


def run_experiment(scenario: Scenario | str, methods=("ABS", "UBS"),
                   seed: int = 0, reps: int | None = None,
                   threads: int = 1) -> list[dict]:
    """Matched-data comparison over replicates.

    Every replicate generates one dataset shared by all methods; only the
    anchor draw differs.  Replicate RNG substreams derive from
    (seed, replicate), so thread scheduling cannot change results.
    """
    if isinstance(scenario, str):
        scenario = SCENARIOS[scenario]
    if reps is not None:
        scenario = replace(scenario, reps=reps)
    methods = tuple(methods)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_replicate, scenario, seed, rep, methods)
                       for rep in range(scenario.reps)]
            per_rep = [f.result() for f in futures]
    else:
        per_rep = [_run_replicate(scenario, seed, rep, methods)
                   for rep in range(scenario.reps)]
    return [row for rows in per_rep for row in rows]


def experiment_summary(rows: list[dict], methods=("ABS", "UBS")) -> dict:
    """Per-method medians, pairwise win counts, and failure counts."""
    by_method: dict[str, dict[int, float]] = {m: {} for m in methods}
    failures = {m: 0 for m in methods}
    for row in rows:
        m = row["method"]
        if m not in by_method:
            continue
        if np.isnan(row["mse"]):
            failures[m] += 1
        else:
            by_method[m][row["replicate"]] = row["mse"]

    summary: dict = {"methods": {}, "failures": failures}
    for m in methods:
        vals = np.array(sorted(by_method[m].values()))
        if vals.size:
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            summary["methods"][m] = {"median_mse": float(med),
                                     "iqr": [float(q1), float(q3)],
                                     "n_fits": int(vals.size)}
        else:
            summary["methods"][m] = {"median_mse": None, "iqr": None,
                                     "n_fits": 0}

    if len(methods) == 2:
        a, b = methods
        shared = sorted(set(by_method[a]) & set(by_method[b]))
        wins = sum(by_method[a][r] < by_method[b][r] for r in shared)
        ties = sum(by_method[a][r] == by_method[b][r] for r in shared)
        summary["comparable_replicates"] = len(shared)
        summary[f"{a.lower()}_wins"] = int(wins)
        summary["ties"] = int(ties)
    return summary


_CSV_COLUMNS = ("replicate", "method", "mse", "nstar", "K", "seed")


def write_experiment_csv(rows: list[dict], path) -> None:
    """Stable plot-ready CSV (shortest round-trip float formatting)."""
    lines = [",".join(_CSV_COLUMNS)]
    for row in rows:
        cells = []
        for col in _CSV_COLUMNS:
            v = row[col]
            cells.append(repr(float(v)) if col == "mse" else str(v))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
