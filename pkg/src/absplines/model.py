"""Functional-ANOVA model construction on mixed covariates.

A model is declared as a list of ANOVA components (covariate subsets).
Each component expands into

* a set of unpenalized null-space basis functions (constant, linear
  monomials of cubic-smoothed covariates, categorical contrasts, and
  their products), and
* a set of penalized terms, each a product of factor kernels (cubic or
  linear smooth, categorical contrast, parametric-linear x*y) carrying a
  positive smoothing multiplier theta.

The combined penalized kernel is R(x, y) = sum_g theta_g * K_g(x, y)
where g runs over theta groups (by default one per penalized term;
``share_theta=True`` pools a component's terms onto one group).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernels import categorical_kernel, cubic_kernel, linear_kernel

__all__ = [
    "Covariate",
    "Factor",
    "PenalizedTerm",
    "NullFunction",
    "ModelSpec",
    "Rescaler",
    "Dataset",
    "build_model",
]

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str  # "continuous" | "categorical"
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"unknown covariate kind {self.kind!r}")
        if self.kind == CATEGORICAL and (self.levels is None or self.levels < 2):
            raise ValueError(f"categorical covariate {self.name!r} needs levels >= 2")


@dataclass(frozen=True)
class Factor:
    """One multiplicand of a term: which covariate, and which kernel/basis.

    kinds: "cubic" | "linear"   smooth kernel factors
           "categorical"        contrast kernel (I[t1==t2] - 1/t)
           "monomial"           parametric-linear factor, kernel x*y,
                                basis value x
           "contrast"           one contrast basis function (needs level)
    """

    covariate: str
    kind: str
    level: int | None = None


@dataclass(frozen=True)
class PenalizedTerm:
    label: str
    component: str
    factors: tuple[Factor, ...]
    theta_group: int


@dataclass(frozen=True)
class NullFunction:
    label: str
    component: str
    factors: tuple[Factor, ...]  # empty tuple = the constant function


@dataclass(frozen=True)
class ModelSpec:
    """Expanded model: covariate schema, penalized terms, null basis."""

    covariates: tuple[Covariate, ...]
    terms: tuple[PenalizedTerm, ...]
    null_basis: tuple[NullFunction, ...]
    theta_labels: tuple[str, ...]
    config: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        names = {c.name for c in self.covariates}
        if len(names) != len(self.covariates):
            raise ValueError("duplicate covariate names")
        for t in self.terms:
            for f in t.factors:
                if f.covariate not in names:
                    raise ValueError(f"term {t.label!r} references unknown "
                                     f"covariate {f.covariate!r}")

    # -- introspection -------------------------------------------------

    @property
    def n_theta(self) -> int:
        return len(self.theta_labels)

    @property
    def null_dim(self) -> int:
        return len(self.null_basis)

    @property
    def components(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.terms:
            seen.setdefault(t.component, None)
        for f in self.null_basis:
            if f.component != "const":
                seen.setdefault(f.component, None)
        return tuple(seen)

    def covariate(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(name)

    def restrict(self, drop: Iterable[str]) -> "ModelSpec":
        """Sub-model with the named ANOVA components removed.

        Theta groups are renumbered; the returned spec's theta vector maps
        onto the retained groups via `restrict_theta`.
        """
        drop = set(drop)
        unknown = drop - set(self.components)
        if unknown:
            raise KeyError(f"unknown components: {sorted(unknown)}")
        keep_terms = [t for t in self.terms if t.component not in drop]
        keep_groups = sorted({t.theta_group for t in keep_terms})
        remap = {g: i for i, g in enumerate(keep_groups)}
        terms = tuple(
            PenalizedTerm(t.label, t.component, t.factors, remap[t.theta_group])
            for t in keep_terms
        )
        null = tuple(f for f in self.null_basis
                     if f.component == "const" or f.component not in drop)
        labels = tuple(self.theta_labels[g] for g in keep_groups)
        return ModelSpec(self.covariates, terms, null, labels, dict(self.config))

    def restrict_theta(self, theta: np.ndarray, drop: Iterable[str]) -> np.ndarray:
        drop = set(drop)
        keep_groups = sorted({t.theta_group for t in self.terms
                              if t.component not in drop})
        return np.asarray(theta, dtype=float)[keep_groups]

    # -- evaluation ----------------------------------------------------

    def null_matrix(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Evaluate the null-space basis at the given (rescaled) columns."""
        n = _n_rows(columns)
        out = np.empty((n, len(self.null_basis)))
        for j, f in enumerate(self.null_basis):
            out[:, j] = _eval_null_function(f, columns, self)
        return out

    def term_gram(self, term: PenalizedTerm,
                  cols_a: Mapping[str, np.ndarray],
                  cols_b: Mapping[str, np.ndarray]) -> np.ndarray:
        """Unit-theta Gram block K_term(a_i, b_j)."""
        na, nb = _n_rows(cols_a), _n_rows(cols_b)
        out = np.ones((na, nb))
        for f in term.factors:
            a = np.asarray(cols_a[f.covariate])
            b = np.asarray(cols_b[f.covariate])
            out *= _factor_kernel(f, a[:, None], b[None, :], self)
        return out

    def gram_stack(self, cols_a, cols_b) -> np.ndarray:
        """Per-theta-group Gram blocks, shape (n_theta, len(a), len(b))."""
        na, nb = _n_rows(cols_a), _n_rows(cols_b)
        out = np.zeros((self.n_theta, na, nb))
        for t in self.terms:
            out[t.theta_group] += self.term_gram(t, cols_a, cols_b)
        return out

    def kernel_matrix(self, cols_a, cols_b, theta) -> np.ndarray:
        """Combined penalized kernel sum_g theta_g K_g(a_i, b_j)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise ValueError(f"theta must have length {self.n_theta}")
        if np.any(theta < 0):
            raise ValueError("theta multipliers must be nonnegative")
        return np.tensordot(theta, self.gram_stack(cols_a, cols_b), axes=1)

    # -- serialization ---------------------------------------------------

    def to_config(self) -> dict:
        return dict(self.config)


def _n_rows(columns: Mapping[str, np.ndarray]) -> int:
    for v in columns.values():
        return int(np.asarray(v).shape[0])
    return 0


def _factor_kernel(f: Factor, a, b, spec: ModelSpec):
    if f.kind == "cubic":
        return cubic_kernel(a, b)
    if f.kind == "linear":
        return linear_kernel(a, b)
    if f.kind == "categorical":
        return categorical_kernel(a, b, spec.covariate(f.covariate).levels)
    if f.kind == "monomial":
        return np.asarray(a, dtype=float) * np.asarray(b, dtype=float)
    raise ValueError(f"factor kind {f.kind!r} has no kernel")


def _eval_null_function(f: NullFunction, columns, spec: ModelSpec) -> np.ndarray:
    out = np.ones(_n_rows(columns))
    for fac in f.factors:
        x = np.asarray(columns[fac.covariate])
        if fac.kind == "monomial":
            out = out * np.asarray(x, dtype=float)
        elif fac.kind == "contrast":
            t = spec.covariate(fac.covariate).levels
            out = out * ((x == fac.level).astype(float) - 1.0 / t)
        else:
            raise ValueError(f"factor kind {fac.kind!r} is not a basis factor")
    return out


# -- model builder -----------------------------------------------------


def build_model(covariates: Sequence[Covariate | Mapping],
                components: Sequence[Sequence[str]],
                smooth: Mapping[str, str] | None = None,
                share_theta: bool = False,
                random_effects: Sequence[str] = ()) -> ModelSpec:
    """Expand ANOVA components into a full ModelSpec.

    Parameters
    ----------
    covariates : schema; Covariate objects or dicts with name/kind/levels.
    components : covariate-name tuples, e.g. [("x1",), ("x1", "g")].
    smooth : per-continuous-covariate smooth kind, "cubic" (default) or
        "linear".
    share_theta : pool each component's penalized sub-terms onto a single
        smoothing multiplier instead of one multiplier per sub-term.
    random_effects : categorical covariates fitted as penalized
        sum-to-zero offsets (ridge shrinkage); each becomes its own
        single-covariate penalized component.
    """
    covs = tuple(c if isinstance(c, Covariate) else Covariate(**c)
                 for c in covariates)
    by_name = {c.name: c for c in covs}
    smooth = dict(smooth or {})
    for name, kind in smooth.items():
        if kind not in ("cubic", "linear"):
            raise ValueError(f"unknown smooth kind {kind!r} for {name!r}")
        if by_name[name].kind != CONTINUOUS:
            raise ValueError(f"smooth kind given for non-continuous {name!r}")
    ranef = set(random_effects)

    comps = [tuple(c) for c in components]
    comps += [(name,) for name in random_effects if (name,) not in comps]
    labels = [":".join(c) for c in comps]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate ANOVA components")

    null_funcs: list[NullFunction] = [NullFunction("1", "const", ())]
    terms: list[PenalizedTerm] = []
    theta_labels: list[str] = []

    for comp, comp_label in zip(comps, labels):
        for name in comp:
            if name not in by_name:
                raise ValueError(f"component references unknown covariate {name!r}")
        shared_group: int | None = None
        if share_theta:
            shared_group = len(theta_labels)
            theta_labels.append(comp_label)
        comp_terms = 0
        for combo in itertools.product(*[_choices(by_name[n], smooth, n in ranef)
                                         for n in comp]):
            if all(kind in ("lin", "contrast") for kind in combo):
                null_funcs.extend(_null_expansion(comp, combo, comp_label, by_name))
                continue
            factors = tuple(_penalized_factor(n, kind, smooth)
                            for n, kind in zip(comp, combo))
            label = "*".join(_factor_label(f) for f in factors)
            if shared_group is None:
                group = len(theta_labels)
                theta_labels.append(label)
            else:
                group = shared_group
            terms.append(PenalizedTerm(label, comp_label, factors, group))
            comp_terms += 1
        if share_theta and comp_terms == 0:
            # purely parametric component: drop its unused theta slot
            theta_labels.pop(shared_group)

    config = {
        "covariates": [
            {"name": c.name, "kind": c.kind,
             **({"levels": c.levels} if c.levels is not None else {})}
            for c in covs
        ],
        "components": [list(c) for c in components],
        "smooth": dict(smooth),
        "share_theta": bool(share_theta),
        "random_effects": list(random_effects),
    }
    return ModelSpec(covs, tuple(terms), tuple(null_funcs),
                     tuple(theta_labels), config)


def model_from_config(config: Mapping) -> ModelSpec:
    """Rebuild a ModelSpec from its JSON-friendly config dict."""
    return build_model(
        covariates=config["covariates"],
        components=[tuple(c) for c in config["components"]],
        smooth=config.get("smooth") or {},
        share_theta=bool(config.get("share_theta", False)),
        random_effects=tuple(config.get("random_effects", ())),
    )


def _choices(cov: Covariate, smooth, penalized_cat: bool) -> list[str]:
    if cov.kind == CATEGORICAL:
        return ["pencat"] if penalized_cat else ["contrast"]
    if smooth.get(cov.name, "cubic") == "linear":
        return ["smooth"]
    return ["lin", "smooth"]


def _penalized_factor(name: str, kind: str, smooth) -> Factor:
    if kind == "smooth":
        return Factor(name, smooth.get(name, "cubic"))
    if kind == "lin":
        return Factor(name, "monomial")
    return Factor(name, "categorical")  # contrast or pencat


def _factor_label(f: Factor) -> str:
    return {"cubic": "s", "linear": "s", "categorical": "c",
            "monomial": "l"}[f.kind] + f"({f.covariate})"


def _null_expansion(comp, combo, comp_label, by_name) -> list[NullFunction]:
    per_cov: list[list[Factor]] = []
    for name, kind in zip(comp, combo):
        if kind == "lin":
            per_cov.append([Factor(name, "monomial")])
        else:  # contrast: one basis function per level 0..t-2
            t = by_name[name].levels
            per_cov.append([Factor(name, "contrast", level=j) for j in range(t - 1)])
    out = []
    for factors in itertools.product(*per_cov):
        label = "*".join(
            f"l({f.covariate})" if f.kind == "monomial"
            else f"c({f.covariate},{f.level})"
            for f in factors
        )
        out.append(NullFunction(label, comp_label, tuple(factors)))
    return out


# -- data ingestion ---------------------------------------------------


@dataclass
class Dataset:
    """Columnar data: named covariate columns, response, optional totals.

    `group` names the column holding random-effect levels, when one exists.
    """

    columns: dict[str, np.ndarray]
    y: np.ndarray
    total: np.ndarray | None = None
    group: str | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.columns = {k: np.asarray(v) for k, v in self.columns.items()}
        if self.total is not None:
            self.total = np.asarray(self.total, dtype=float)
            if self.total.shape != self.y.shape:
                raise ValueError("total must match response length")
        for k, v in self.columns.items():
            if v.shape[0] != self.y.shape[0]:
                raise ValueError(f"column {k!r} length does not match response")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def take(self, idx) -> "Dataset":
        return Dataset(
            {k: v[idx] for k, v in self.columns.items()},
            self.y[idx],
            None if self.total is None else self.total[idx],
            self.group,
        )


@dataclass
class Rescaler:
    """Affine map of each continuous covariate onto [0, 1].

    Bounds come from the training data and are stored so prediction uses
    the same map; out-of-range prediction points are clamped with a
    warning (kernels are only defined on the unit interval).
    """

    bounds: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, columns: Mapping[str, np.ndarray],
            covariates: Sequence[Covariate]) -> "Rescaler":
        bounds = {}
        for c in covariates:
            if c.kind != CONTINUOUS:
                continue
            x = np.asarray(columns[c.name], dtype=float)
            lo, hi = float(np.min(x)), float(np.max(x))
            bounds[c.name] = (lo, hi)
        return cls(bounds)

    def transform(self, columns: Mapping[str, np.ndarray],
                  clamp: bool = True) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, x in columns.items():
            if name not in self.bounds:
                out[name] = np.asarray(x)
                continue
            lo, hi = self.bounds[name]
            x = np.asarray(x, dtype=float)
            z = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
            n_out = int(np.sum((z < 0) | (z > 1)))
            if n_out:
                if not clamp:
                    raise ValueError(f"{name!r}: {n_out} values outside the "
                                     "training range")
                warnings.warn(f"{name!r}: clamping {n_out} values outside the "
                              "training range to [0, 1]")
                z = np.clip(z, 0.0, 1.0)
            out[name] = z
        return out

    def to_dict(self) -> dict:
        return {k: [v[0], v[1]] for k, v in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Rescaler":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})
