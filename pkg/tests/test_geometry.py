import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gausspath.geometry import (Configuration, ConfigurationError, GaussianTerm, PeriodicDomain,
                                evaluate, evaluate_gradient, periodic_displacement,
                                truncation_radius)


def single_term(domain, c, center, width, ncomp=1):
    dims = domain.dims
    return Configuration(domain, np.full((ncomp, 1), c),
                         np.broadcast_to(np.asarray(center, float), (ncomp, 1, dims)).copy(),
                         np.full((ncomp, 1), width))


def random_config(rng, domain, n=12, ncomp=1, wlo=0.3, whi=1.2):
    ext = np.asarray(domain.extents)
    return Configuration(domain, rng.normal(size=(ncomp, n)),
                         rng.random((ncomp, n, domain.dims)) * ext,
                         rng.uniform(wlo, whi, (ncomp, n)))


class TestDomain:
    def test_rejects_bad_extents(self):
        with pytest.raises(ConfigurationError):
            PeriodicDomain((0.0,))
        with pytest.raises(ConfigurationError):
            PeriodicDomain((1.0, 1.0))
        with pytest.raises(ConfigurationError):
            PeriodicDomain((1.0, 1.0, -1.0, 2.0))

    def test_volume_and_wrap(self):
        d = PeriodicDomain((2.0, 3.0, 4.0, 5.0))
        assert d.volume == 120.0
        w = d.wrap([[-1e-17, 3.0, 9.5, -0.5]])
        assert np.all(w >= 0) and np.all(w < np.asarray(d.extents))

    def test_term_width_positive(self):
        with pytest.raises(ConfigurationError):
            GaussianTerm(1.0, (0.0,), 0.0)


class TestDisplacement:
    def test_identity(self):
        assert periodic_displacement(0.5, 0.5, PeriodicDomain((20.0,))) == 0.0

    def test_minimal_image_1d(self):
        assert periodic_displacement(19.5, 0.5, PeriodicDomain((20.0,))) == pytest.approx(-1.0)

    def test_minimal_image_4d(self):
        # a - b = -5 along x, whose minimal image on a period of 7 is +2
        d = PeriodicDomain((7.0,) * 4)
        got = periodic_displacement(np.array([1.0, 1, 1, 1]), np.array([6.0, 1, 1, 1]), d)
        np.testing.assert_allclose(got, [2.0, 0, 0, 0])
        # brute force over image shifts agrees
        shifts = np.arange(-2, 3) * 7.0
        best = min((-5.0 + s for s in shifts), key=abs)
        assert got[0] == best

    def test_tie_goes_positive(self):
        d = PeriodicDomain((4.0,))
        assert periodic_displacement(3.0, 1.0, d) == 2.0
        assert periodic_displacement(1.0, 3.0, d) == 2.0

    @given(st.floats(0, 20, exclude_max=True), st.floats(0, 20, exclude_max=True))
    def test_range_and_antisymmetry(self, a, b):
        d = PeriodicDomain((20.0,))
        x = periodic_displacement(a, b, d)
        y = periodic_displacement(b, a, d)
        assert -10.0 <= x <= 10.0
        if abs(abs(x) - 10.0) > 1e-9:
            assert x == pytest.approx(-y, abs=1e-12)


class TestEvaluate:
    def test_zero_coefficients(self):
        d = PeriodicDomain((20.0,))
        c = single_term(d, 0.0, [10.0], 1.0)
        assert evaluate(c, 0, 3.3) == 0.0
        np.testing.assert_array_equal(evaluate_gradient(c, 0, [3.3]), [[0.0]])

    def test_peak_and_unit_offset(self):
        d = PeriodicDomain((20.0,))
        c = single_term(d, 1.0, [10.0], 1.0)
        assert evaluate(c, 0, 10.0) == 1.0
        assert evaluate(c, 0, 11.0) == pytest.approx(math.exp(-1.0), rel=1e-15)
        assert evaluate(c, 0, 11.0, epsilon=1e-8) == pytest.approx(math.exp(-1.0), rel=1e-15)

    def test_gradient_examples(self):
        d = PeriodicDomain((7.0,) * 4)
        c = single_term(d, 1.0, [3.0, 3.0, 3.0, 3.0], 1.0)
        np.testing.assert_allclose(evaluate_gradient(c, 0, np.array([3.0, 3, 3, 3])), 0.0)
        g = evaluate_gradient(c, 0, np.array([3.0, 4.0, 3.0, 3.0]))
        np.testing.assert_allclose(g, [0.0, -2 * math.exp(-1), 0.0, 0.0], atol=1e-15)
        g_fd = (evaluate(c, 0, np.array([3.0, 4.0 + 1e-5, 3, 3]))
                - evaluate(c, 0, np.array([3.0, 4.0 - 1e-5, 3, 3]))) / 2e-5
        assert g_fd == pytest.approx(-0.735759, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(-3, 3))
    def test_periodicity(self, seed, shift):
        rng = np.random.default_rng(seed)
        d = PeriodicDomain((5.0, 6.0, 7.0, 8.0))
        c = random_config(rng, d)
        x = rng.random((5, 4)) * np.asarray(d.extents)
        moved = x + shift * np.asarray(d.extents)
        np.testing.assert_allclose(evaluate(c, 0, moved), evaluate(c, 0, x), rtol=1e-12,
                                   atol=1e-14)

    def test_gradient_matches_central_difference(self):
        rng = np.random.default_rng(7)
        h = 1e-5
        for dims_ext in [(6.0,), (4.0, 5.0, 6.0, 7.0)]:
            d = PeriodicDomain(dims_ext)
            for _ in range(50):
                c = random_config(rng, d, n=6)
                x = rng.random(d.dims) * np.asarray(d.extents)
                xs = x if d.dims > 1 else float(x[0])
                g = np.atleast_1d(evaluate_gradient(c, 0, xs)).ravel()
                for a in range(d.dims):
                    e = np.zeros(d.dims)
                    e[a] = h
                    if d.dims == 1:
                        fd = (evaluate(c, 0, xs + h) - evaluate(c, 0, xs - h)) / (2 * h)
                    else:
                        fd = (evaluate(c, 0, x + e) - evaluate(c, 0, x - e)) / (2 * h)
                    assert abs(g[a] - fd) <= 1e-6 * (1 + abs(g[a]))

    @pytest.mark.parametrize("eps", [1e-4, 1e-8])
    def test_truncation_soundness(self, eps):
        rng = np.random.default_rng(3)
        d = PeriodicDomain((6.0, 6.0, 6.0, 12.0))
        c = random_config(rng, d, n=40, ncomp=2)
        x = rng.random((200, 4)) * np.asarray(d.extents)
        for comp in range(2):
            full = evaluate(c, comp, x)
            cut = evaluate(c, comp, x, epsilon=eps)
            bound = c.n_sum * eps * np.abs(c.coefficients[comp]).max()
            assert np.all(np.abs(cut - full) <= bound)
            gfull = evaluate_gradient(c, comp, x)
            gcut = evaluate_gradient(c, comp, x, epsilon=eps)
            assert np.all(np.isfinite(gcut)) and np.abs(gcut - gfull).max() < 1e2 * bound


class TestTruncationRadius:
    def test_examples(self):
        assert truncation_radius(1.0, math.exp(-9)) == pytest.approx(3.0)
        assert truncation_radius(0.2, math.exp(-9)) == pytest.approx(0.6)
        assert truncation_radius(1.0, 1e-8) == pytest.approx(4.2919, abs=1e-4)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 2.0])
    def test_domain_error(self, eps):
        with pytest.raises(ValueError):
            truncation_radius(1.0, eps)


class TestConfiguration:
    def test_shape_checks(self):
        d = PeriodicDomain((5.0,))
        with pytest.raises(ConfigurationError):
            Configuration(d, np.zeros((1, 3)), np.zeros((1, 2, 1)), np.ones((1, 3)))
        with pytest.raises(ConfigurationError):
            Configuration(d, np.zeros((1, 3)), np.zeros((1, 3, 1)), np.zeros((1, 3)))

    def test_centers_inside_domain(self):
        d = PeriodicDomain((5.0,))
        with pytest.raises(ConfigurationError):
            Configuration(d, np.zeros((1, 1)), np.full((1, 1, 1), 5.0), np.ones((1, 1)))

    def test_terms_and_copy(self):
        d = PeriodicDomain((5.0,))
        c = single_term(d, 2.0, [1.0], 0.5)
        (t,) = c.terms(0)
        assert (t.coefficient, t.center, t.width) == (2.0, (1.0,), 0.5)
        cc = c.copy()
        cc.coefficients[0, 0] = 9.0
        assert c.coefficients[0, 0] == 2.0
