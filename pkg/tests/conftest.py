import numpy as np
import pytest

from absplines.model import Covariate, Dataset, build_model
from absplines.sampling import EffectiveBasis


def manual_basis(indices, n_stats=None, stats=None):
    """EffectiveBasis with hand-picked anchors (single slice)."""
    indices = np.asarray(indices, dtype=int)
    if stats is None:
        stats = np.zeros(1)
    return EffectiveBasis(
        anchor_indices=indices,
        slice_ids=np.zeros(indices.shape[0], dtype=int),
        n_slices=1,
        slice_counts=np.array([n_stats if n_stats is not None
                               else indices.shape[0]]),
        allocations=np.array([indices.shape[0]]),
        boundaries=np.array([float(np.min(stats)), float(np.max(stats))]),
        seed=None,
    )


@pytest.fixture
def cubic_spec():
    return build_model([Covariate("x", "continuous")], [("x",)])


@pytest.fixture
def gaussian_toy():
    rng = np.random.default_rng(10)
    n = 80
    x = np.sort(rng.uniform(0.01, 0.99, n))
    y = np.sin(2 * np.pi * x) + 0.3 * rng.normal(size=n)
    return Dataset({"x": x}, y)
