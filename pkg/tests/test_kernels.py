"""Kernel closed forms against quadrature, symmetry, positive definiteness."""

import numpy as np
import pytest
from scipy.integrate import quad

from absplines.kernels import categorical_kernel, cubic_kernel, linear_kernel


def cubic_quadrature(x1, x2):
    """Adaptive quadrature of int_0^1 (x1-u)_+ (x2-u)_+ du."""
    val, _ = quad(lambda u: max(x1 - u, 0.0) * max(x2 - u, 0.0), 0.0, 1.0,
                  epsabs=1e-12, epsrel=1e-12)
    return val


class TestCubicKernel:
    def test_vanishes_at_origin(self):
        x2 = np.linspace(0, 1, 11)
        np.testing.assert_allclose(cubic_kernel(0.0, x2), 0.0, atol=0)

    def test_half_point(self):
        # int_0^0.5 (0.5-u)^2 du = 0.5^3/3, quadrature-checked
        assert cubic_kernel(0.5, 0.5) == pytest.approx(0.125 / 3.0, abs=1e-12)
        assert cubic_kernel(0.5, 0.5) == pytest.approx(
            cubic_quadrature(0.5, 0.5), abs=1e-10)

    def test_asymmetric_point(self):
        assert cubic_kernel(0.3, 0.8) == pytest.approx(0.0315, abs=1e-12)
        assert cubic_kernel(0.3, 0.8) == pytest.approx(
            cubic_quadrature(0.3, 0.8), abs=1e-10)

    def test_closed_form_matches_quadrature_on_grid(self):
        # acceptance tolerance: 1e-8 max abs error on a 20 x 20 grid
        grid = np.linspace(0.013, 0.987, 20)
        worst = 0.0
        for x1 in grid:
            for x2 in grid:
                worst = max(worst, abs(cubic_kernel(x1, x2)
                                       - cubic_quadrature(x1, x2)))
        assert worst <= 1e-8

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="rescale"):
            cubic_kernel(1.2, 0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, 40), rng.uniform(0, 1, 40)
        np.testing.assert_allclose(cubic_kernel(a, b), cubic_kernel(b, a),
                                   atol=0)


class TestLinearKernel:
    def test_vanishes_at_origin(self):
        assert linear_kernel(0.0, 0.7) == 0.0

    def test_is_min(self):
        assert linear_kernel(0.4, 0.9) == pytest.approx(0.4)

    def test_gram_psd(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, 50)
        G = linear_kernel(x[:, None], x[None, :])
        eig = np.linalg.eigvalsh(G)
        assert eig.min() >= -1e-8 * max(eig.max(), 1e-300)


class TestCategoricalKernel:
    def test_two_levels(self):
        assert categorical_kernel(0, 0, 2) == pytest.approx(0.5)
        assert categorical_kernel(0, 1, 2) == pytest.approx(-0.5)

    def test_four_levels_match(self):
        assert categorical_kernel(2, 2, 4) == pytest.approx(0.75)

    def test_rejects_bad_level(self):
        with pytest.raises(ValueError, match="out of range"):
            categorical_kernel(4, 0, 4)

    def test_rows_sum_to_zero(self):
        # ANOVA side condition: sum over the second level of k(t1, .) is 0
        t = 5
        for t1 in range(t):
            total = sum(categorical_kernel(t1, t2, t) for t2 in range(t))
            assert total == pytest.approx(0.0, abs=1e-12)

    def test_gram_psd(self):
        rng = np.random.default_rng(3)
        codes = rng.integers(0, 4, 40)
        G = categorical_kernel(codes[:, None], codes[None, :], 4)
        eig = np.linalg.eigvalsh(G)
        assert eig.min() >= -1e-8 * max(eig.max(), 1e-300)
