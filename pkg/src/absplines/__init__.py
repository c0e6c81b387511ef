"""Exponential-family smoothing-spline ANOVA with adaptive basis sampling.

Large penalized-likelihood spline fits are approximated in a
low-dimensional effective model space whose kernel anchors are sampled
by slicing the response range, so rare response regimes still contribute
basis functions.  Smoothing parameters are tuned by generalized
approximate cross-validation.
"""

from .families import (
    Binomial,
    DegenerateWeightError,
    DomainError,
    Family,
    Gaussian,
    NegativeBinomial,
    Poisson,
    make_family,
)
from .fitting import (
    ConfigurationError,
    FitResult,
    NewtonControl,
    SearchConfig,
    TuningError,
    assemble,
    fit_model,
    gacv,
    newton_fit,
    predict,
    pwls_solve,
    smoothing_traces,
    tune,
)
from .kernels import categorical_kernel, cubic_kernel, linear_kernel
from .model import (
    Covariate,
    Dataset,
    ModelSpec,
    Rescaler,
    build_model,
)
from .sampling import (
    EffectiveBasis,
    adaptive_sample,
    allocate,
    default_nstar,
    scott_slice_count,
    slice_statistics,
    uniform_sample,
)

__version__ = "0.1.0"

__all__ = [
    "Binomial",
    "ConfigurationError",
    "Covariate",
    "Dataset",
    "DegenerateWeightError",
    "DomainError",
    "EffectiveBasis",
    "Family",
    "FitResult",
    "Gaussian",
    "ModelSpec",
    "NegativeBinomial",
    "NewtonControl",
    "Poisson",
    "Rescaler",
    "SearchConfig",
    "TuningError",
    "adaptive_sample",
    "allocate",
    "assemble",
    "build_model",
    "categorical_kernel",
    "cubic_kernel",
    "default_nstar",
    "fit_model",
    "gacv",
    "linear_kernel",
    "make_family",
    "newton_fit",
    "predict",
    "pwls_solve",
    "scott_slice_count",
    "slice_statistics",
    "smoothing_traces",
    "tune",
    "uniform_sample",
]
