import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from geoflow.density import GaussianMixture
from geoflow.geodesic import DiscretePath, optimize_path
from geoflow.metrics import (
    el_residual_curve,
    endpoint_rmse,
    energy_distance,
    interpolant_nodes,
    path_residual,
    path_smoothness,
    relative_log_prob,
)

from conftest import random_corrector, random_gmm


def arc(x0, x1, bend, n):
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    d = x1 - x0
    normal = np.array([-d[1], d[0]])
    return (1 - t) * x0 + t * x1 + bend * np.sin(np.pi * t) * normal


class TestRelativeLogProb:
    def test_gaussian_line(self):
        m = GaussianMixture.standard_normal(2)
        pts = np.linspace([0.0, 0.0], [1.0, 0.0], 513)
        r = relative_log_prob(pts, m)
        assert r[0] == 0.0
        assert abs(r[-1] + 0.5) < 1e-4

    def test_closed_loop(self, rng):
        m = random_gmm(rng)
        x0, x1 = np.array([-1.0, 0.5]), np.array([1.5, -0.2])
        go = arc(x0, x1, 0.4, 256)
        back = arc(x1, x0, 0.3, 256)
        loop = np.concatenate([go, back[1:]])
        assert abs(relative_log_prob(loop, m)[-1]) < 1e-4

    def test_path_independence(self, rng):
        for _ in range(5):
            m = random_gmm(rng)
            x0, x1 = rng.normal(0, 1.5, 2), rng.normal(0, 1.5, 2)
            a = relative_log_prob(arc(x0, x1, 0.0, 512), m)[-1]
            b = relative_log_prob(arc(x0, x1, 0.5, 512), m)[-1]
            assert abs(a - b) < 1e-3
            exact = m.log_density(x1) - m.log_density(x0)
            assert abs(a - exact) < 1e-3

    def test_second_order(self, rng):
        m = random_gmm(rng, spread=1.0)
        x0, x1 = np.array([-1.0, 0.3]), np.array([1.2, 0.8])
        exact = m.log_density(x1) - m.log_density(x0)
        errs = [abs(relative_log_prob(arc(x0, x1, 0.4, n), m)[-1] - exact) for n in (64, 128, 256)]
        assert 3.0 < errs[0] / errs[1] < 5.0
        assert 3.0 < errs[1] / errs[2] < 5.0

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            relative_log_prob(np.zeros((2, 2)), GaussianMixture.standard_normal(2))


class TestResidualCurve:
    def test_zero_corrector_flat(self, rng):
        flat = GaussianMixture.isotropic([[0.0, 0.0]], 1e12)
        pairs = (rng.normal(size=(6, 2)), rng.normal(size=(6, 2)))
        curve, skipped = el_residual_curve(None, flat, pairs, np.linspace(0.1, 0.9, 9))
        assert skipped == 0
        assert np.max(curve) < 1e-9

    def test_interior_grid_only(self):
        m = GaussianMixture.standard_normal(2)
        with pytest.raises(ValueError):
            el_residual_curve(None, m, (np.zeros((1, 2)), np.ones((1, 2))), [0.0, 0.5])
        with pytest.raises(ValueError):
            el_residual_curve(None, m, (np.zeros((1, 2)), np.ones((1, 2))), [0.5, 1.0])

    def test_degenerate_pairs_skipped(self):
        m = GaussianMixture.standard_normal(2)
        x0 = np.array([[0.0, 0.0], [1.0, 1.0]])
        x1 = np.array([[0.0, 0.0], [2.0, 1.0]])
        curve, skipped = el_residual_curve(None, m, (x0, x1), [0.25, 0.5])
        assert skipped == 1
        single, _ = el_residual_curve(None, m, (x0[1:], x1[1:]), [0.25, 0.5])
        np.testing.assert_allclose(curve, single)

    def test_line_matches_node_residual(self):
        m = GaussianMixture.isotropic([[-1.0, 0.0], [1.0, 0.5]], 0.8)
        x0, x1 = np.array([-1.5, 0.2]), np.array([1.3, -0.4])
        n = 64
        stencil = path_residual(interpolant_nodes(None, x0, x1, n), m)
        exact, _ = el_residual_curve(None, m, (x0[None], x1[None]), np.arange(1, n) / n)
        np.testing.assert_allclose(exact, stencil, rtol=1e-10)

    def test_corrector_changes_curve(self):
        m = GaussianMixture.isotropic([[-1.0, 0.0], [1.0, 0.5]], 0.8)
        pairs = (np.array([[-1.5, 0.2]]), np.array([[1.3, -0.4]]))
        t = np.linspace(0.1, 0.9, 5)
        lin, _ = el_residual_curve(None, m, pairs, t)
        bent, _ = el_residual_curve(random_corrector(), m, pairs, t)
        assert np.all(np.isfinite(bent)) and not np.allclose(lin, bent)


class TestSmoothness:
    def test_straight_line(self):
        x0, x1 = np.array([0.3, -1.0]), np.array([2.0, 1.5])
        pts = np.linspace(x0, x1, 11)
        ppl, turn = path_smoothness(pts)
        assert turn == pytest.approx(0.0, abs=1e-7)
        assert abs(ppl - np.sum((x1 - x0) ** 2)) < 1e-12

    def test_geodesic_around_gap_longer(self):
        m = GaussianMixture.isotropic([[-2.5, 0.0], [2.5, 0.0], [0.0, 2.0]], 0.7, weights=[0.4, 0.4, 0.2])
        x0, x1 = np.array([-2.5, 0.0]), np.array([2.5, 0.0])
        out = optimize_path(DiscretePath.linear(x0, x1, 64), m)
        ppl_geo, turn_geo = path_smoothness(out.path.nodes)
        ppl_lin, _ = path_smoothness(DiscretePath.linear(x0, x1, 64).nodes)
        assert ppl_geo > ppl_lin
        assert turn_geo > 0

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            path_smoothness(np.zeros((2, 2)))


class TestEnergyDistance:
    def test_identical(self, rng):
        a = rng.normal(size=(300, 2))
        assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_null(self, rng):
        assert energy_distance(rng.normal(size=10_000), rng.normal(size=10_000)) < 0.01

    def test_shift_matches_quadrature(self, rng):
        def mean_abs(mu, sd):
            f = lambda z: abs(z) * stats.norm.pdf(z, mu, sd)
            return integrate.quad(f, -np.inf, 0.0)[0] + integrate.quad(f, 0.0, np.inf)[0]

        expected = 2 * mean_abs(3.0, np.sqrt(2)) - 2 * mean_abs(0.0, np.sqrt(2))
        got = energy_distance(rng.normal(size=4000), rng.normal(3.0, 1.0, size=4000))
        assert abs(got / expected - 1) < 0.03

    def test_subsample(self, rng):
        a, b = rng.normal(size=(3000, 2)), rng.normal(1.0, 1.0, (3000, 2))
        full = energy_distance(a, b)
        subs = [energy_distance(a, b, max_points=1000, rng=np.random.default_rng(s)) for s in range(10)]
        assert abs(np.mean(subs) / full - 1) < 0.05

    def test_too_small(self):
        with pytest.raises(ValueError):
            energy_distance(np.zeros((1, 2)), np.zeros((5, 2)))
        with pytest.raises(ValueError):
            energy_distance(np.zeros((0, 2)), np.zeros((5, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        a = r.normal(size=(r.integers(2, 40), 3))
        b = r.normal(r.normal(), 1.0, (r.integers(2, 40), 3))
        ab, ba = energy_distance(a, b), energy_distance(b, a)
        assert ab >= 0
        assert ab == pytest.approx(ba, rel=1e-12, abs=1e-14)


class TestRmse:
    def test_identical(self, rng):
        a = rng.normal(size=(10, 3))
        assert endpoint_rmse(a, a) == 0.0

    def test_offset(self, rng):
        a = rng.normal(size=(10, 3))
        b = np.array([1.0, -2.0, 2.0])
        assert endpoint_rmse(a + b, a) == pytest.approx(3.0, rel=1e-14)

    def test_noise(self, rng):
        a = rng.normal(size=(20_000, 4))
        got = endpoint_rmse(a + 0.3 * rng.normal(size=a.shape), a)
        assert abs(got / (0.3 * 2.0) - 1) < 0.05

    def test_mismatch(self):
        with pytest.raises(ValueError):
            endpoint_rmse(np.zeros((3, 2)), np.zeros((4, 2)))


def test_metrics_are_pure(rng):
    m = random_gmm(rng)
    pts = arc(np.zeros(2), np.ones(2), 0.3, 64)
    before = pts.copy()
    a = relative_log_prob(pts, m)
    b = relative_log_prob(pts, m)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(pts, before)
