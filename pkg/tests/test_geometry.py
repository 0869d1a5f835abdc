import math

import numpy as np
import pytest
from scipy.special import gammainc, ndtri

from chance_mpc.geometry import (
    ConfidenceEllipsoid,
    HalfspaceConstraint,
    InsideCollisionRegionError,
    PredictedRegionSequence,
    chance_to_halfspace,
    ellipsoid_from_gaussian,
    min_distance_to_region,
    project_onto_ellipsoid,
    radial_mass,
    scaling_factor,
)


def chi2_quantile_3dof(p):
    # Independent oracle: bisection on the regularized lower incomplete
    # gamma function, which is the 3-dof chi-square CDF at x/2.
    lo, hi = 0.0, 200.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gammainc(1.5, 0.5 * mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_spd(rng, lo=0.01, hi=0.06):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    lam = rng.uniform(lo, hi, size=3)
    return q @ np.diag(lam) @ q.T


def fibonacci_sphere(n):
    i = np.arange(n, dtype=float) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    golden = np.pi * (1.0 + math.sqrt(5.0))
    theta = golden * i
    return np.stack(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)],
        axis=1,
    )


class TestScalingFactor:
    def test_reference_levels(self):
        assert scaling_factor(0.90) == pytest.approx(2.5003, abs=5e-4)
        assert scaling_factor(0.95) == pytest.approx(2.7955, abs=5e-4)
        assert scaling_factor(0.99) == pytest.approx(3.3682, abs=5e-4)

    def test_matches_chi_square_quantile(self):
        for p in (0.5, 0.8, 0.9, 0.95, 0.99, 0.999):
            r = scaling_factor(p)
            assert r == pytest.approx(math.sqrt(chi2_quantile_3dof(p)), abs=1e-6)

    def test_solver_residual(self):
        for p in (0.55, 0.9, 0.95, 0.99, 0.9999):
            r = scaling_factor(p)
            assert abs(float(radial_mass(r)) - p) < 1e-10

    def test_monotone(self):
        ps = np.linspace(0.05, 0.995, 40)
        rs = [scaling_factor(p) for p in ps]
        assert np.all(np.diff(rs) > 0)

    def test_domain(self):
        with pytest.raises(ValueError):
            scaling_factor(0.0)
        with pytest.raises(ValueError):
            scaling_factor(1.0)


class TestEllipsoid:
    def test_diag_semi_axes_sorted(self):
        ell = ellipsoid_from_gaussian(
            np.zeros(3), np.diag([0.01, 0.09, 0.04]), 0.95
        )
        r = scaling_factor(0.95)
        assert np.allclose(ell.axes_lambda, [0.09, 0.04, 0.01], atol=1e-12)
        assert np.allclose(ell.semi_axes, r * np.sqrt([0.09, 0.04, 0.01]), atol=1e-12)

    def test_monte_carlo_containment(self):
        rng = np.random.default_rng(42)
        cov = random_spd(rng, 0.02, 0.3)
        mean = np.array([0.5, -1.0, 2.0])
        ell = ellipsoid_from_gaussian(mean, cov, 0.95)
        chol = np.linalg.cholesky(cov)
        x = mean + rng.normal(size=(100_000, 3)) @ chol.T
        z = (x - mean) @ ell.axes_dirs
        m2 = np.sum(z * z / ell.axes_lambda, axis=1)
        frac = np.mean(m2 <= ell.scale**2)
        assert frac == pytest.approx(0.95, abs=0.005)

    def test_degenerate_covariance_floored(self):
        ell = ellipsoid_from_gaussian(np.zeros(3), np.zeros((3, 3)), 0.9)
        assert np.all(ell.axes_lambda >= 1e-12)

    def test_asymmetric_rejected(self):
        cov = np.diag([1.0, 1.0, 1.0])
        cov[0, 1] = 0.5
        with pytest.raises(ValueError):
            ellipsoid_from_gaussian(np.zeros(3), cov, 0.9)

    def test_indefinite_rejected(self):
        with pytest.raises(ValueError):
            ellipsoid_from_gaussian(np.zeros(3), np.diag([1.0, -0.5, 1.0]), 0.9)


class TestProjection:
    def test_interior_point_returned(self):
        ell = ellipsoid_from_gaussian(np.zeros(3), np.eye(3) * 0.04, 0.95)
        p = np.array([0.1, 0.0, 0.05])
        assert np.allclose(project_onto_ellipsoid(p, ell), p)
        assert min_distance_to_region(p, ell) == 0.0

    def test_sphere_closed_form(self):
        ell = ellipsoid_from_gaussian(np.ones(3), np.eye(3) * 0.04, 0.95)
        rad = ell.scale * 0.2
        p = np.ones(3) + np.array([2.0, 0.0, 0.0])
        proj = project_onto_ellipsoid(p, ell)
        assert np.allclose(proj, np.ones(3) + [rad, 0.0, 0.0], atol=1e-10)
        assert min_distance_to_region(p, ell) == pytest.approx(2.0 - rad, abs=1e-10)

    def test_axis_aligned_outside_on_axis(self):
        ell = ellipsoid_from_gaussian(np.zeros(3), np.diag([0.04, 0.01, 0.01]), 0.9)
        a = ell.semi_axes[0]
        proj = project_onto_ellipsoid(np.array([5.0, 0.0, 0.0]), ell)
        assert np.allclose(proj, [a, 0.0, 0.0], atol=1e-10)

    def test_random_cases_against_boundary_grid(self):
        rng = np.random.default_rng(2024)
        dirs = fibonacci_sphere(100_000)
        for _ in range(50):
            cov = random_spd(rng)
            center = rng.normal(scale=1.0, size=3)
            ell = ellipsoid_from_gaussian(center, cov, 0.95)
            p = center + rng.normal(scale=1.2, size=3)
            if ell.contains(p):
                p = center + 2.5 * (p - center + 1e-3)
            proj = project_onto_ellipsoid(p, ell)
            boundary = center + (ell.semi_axes * dirs) @ ell.axes_dirs.T
            d2 = np.sum((boundary - p) ** 2, axis=1)
            best = boundary[np.argmin(d2)]
            assert np.linalg.norm(proj - best) < 1e-2
            assert np.linalg.norm(proj - p) <= math.sqrt(np.min(d2)) + 1e-12
            # Stationarity: some non-negative multiplier makes the
            # optimality residual vanish.
            g = ell.axes_dirs @ ((ell.axes_dirs.T @ (proj - center)) / ell.axes_lambda)
            lam = -float((proj - p) @ g) / float(g @ g)
            assert lam >= 0.0
            assert np.linalg.norm((proj - p) + lam * g) < 1e-8

    def test_perturbation_does_not_improve(self):
        rng = np.random.default_rng(5)
        cov = random_spd(rng)
        ell = ellipsoid_from_gaussian(np.zeros(3), cov, 0.95)
        p = np.array([1.0, -0.8, 0.6])
        proj = project_onto_ellipsoid(p, ell)
        base = np.linalg.norm(proj - p)
        # Move along the boundary (rescale ellipsoid radius after a
        # small tangent step) and verify the distance grows.
        for _ in range(20):
            step = rng.normal(scale=1e-3, size=3)
            y = proj + step
            z = ell.axes_dirs.T @ (y - ell.center)
            m = math.sqrt(float(np.sum(z * z / ell.axes_lambda))) / ell.scale
            y_on = ell.center + ell.axes_dirs @ (z / m)
            assert np.linalg.norm(y_on - p) >= base - 1e-9


class TestHalfspace:
    def test_half_probability_gives_zero_margin(self):
        hs = chance_to_halfspace(
            np.array([3.0, 0.0, 0.0]), np.zeros(3), np.eye(3) * 0.04, 0.95, 0.5
        )
        assert hs.margin == pytest.approx(0.0, abs=1e-12)

    def test_margin_matches_normal_quantile(self):
        # Unit covariance: margin reduces to the one-sided Gaussian
        # quantile sqrt(2)*erfinv(1-2*phi) = ndtri(1-phi).
        hs = chance_to_halfspace(
            np.array([9.0, 0.0, 0.0]), np.zeros(3), np.eye(3), 0.95, 0.05
        )
        assert hs.margin == pytest.approx(float(ndtri(0.95)), abs=1e-9)

    def test_normal_points_to_query(self):
        p = np.array([2.0, 1.0, -1.0])
        hs = chance_to_halfspace(p, np.zeros(3), np.eye(3) * 0.02, 0.95, 0.05)
        gap = p - hs.anchor
        assert np.allclose(hs.normal, gap / np.linalg.norm(gap), atol=1e-9)
        assert hs.violation(p) < 0.0  # the query point satisfies its own plane

    def test_monte_carlo_tail_probability(self):
        rng = np.random.default_rng(99)
        n = 100_000
        for _ in range(20):
            cov = random_spd(rng, 0.05, 0.4)
            mean = rng.normal(size=3)
            phi = rng.uniform(0.02, 0.3)
            p = mean + rng.normal(size=3) * 2.5
            ell = ellipsoid_from_gaussian(mean, cov, 0.95)
            if ell.contains(p):
                p = mean + 4.0 * (p - mean)
            hs = chance_to_halfspace(p, mean, cov, 0.95, phi)
            chol = np.linalg.cholesky(cov)
            x = mean + rng.normal(size=(n, 3)) @ chol.T
            # Equality case of the tail bound: a plane `margin` beyond the
            # mean along the normal is crossed with probability phi.
            crossed = (x - mean) @ hs.normal > hs.margin
            assert np.mean(crossed) == pytest.approx(phi, abs=0.01)
            # The as-built plane sits further out, so it is conservative.
            beyond = (x - hs.anchor) @ hs.normal > hs.margin
            assert np.mean(beyond) <= phi + 0.01

    def test_ellipsoid_on_safe_side(self):
        rng = np.random.default_rng(17)
        dirs = fibonacci_sphere(20_000)
        cov = random_spd(rng, 0.05, 0.3)
        mean = np.array([1.0, 2.0, 0.5])
        p = mean + np.array([1.5, -0.7, 0.9])
        hs = chance_to_halfspace(p, mean, cov, 0.95, 0.05)
        ell = ellipsoid_from_gaussian(mean, cov, 0.95)
        boundary = mean + (ell.semi_axes * dirs) @ ell.axes_dirs.T
        assert np.max((boundary - hs.anchor) @ hs.normal) <= 1e-9

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(31)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        cov = random_spd(rng, 0.05, 0.3)
        mean = np.array([0.4, -0.2, 1.0])
        p = mean + np.array([1.2, 0.8, -0.5])
        hs = chance_to_halfspace(p, mean, cov, 0.95, 0.05)
        hs_rot = chance_to_halfspace(q @ p, q @ mean, q @ cov @ q.T, 0.95, 0.05)
        assert np.allclose(hs_rot.normal, q @ hs.normal, atol=1e-8)
        assert np.allclose(hs_rot.anchor, q @ hs.anchor, atol=1e-8)
        assert hs_rot.margin == pytest.approx(hs.margin, abs=1e-9)

    def test_inside_point_signals(self):
        with pytest.raises(InsideCollisionRegionError):
            chance_to_halfspace(
                np.array([0.05, 0.0, 0.0]), np.zeros(3), np.eye(3) * 0.04, 0.95, 0.05
            )

    def test_phi_domain(self):
        with pytest.raises(ValueError):
            chance_to_halfspace(
                np.array([5.0, 0.0, 0.0]), np.zeros(3), np.eye(3), 0.95, 0.7
            )


class TestPredictedRegionSequence:
    def test_clips_tiny_negative_eigenvalues(self):
        covs = np.repeat(np.diag([0.01, 0.01, -1e-12])[None], 4, axis=0)
        seq = PredictedRegionSequence(
            times=np.arange(4.0), means=np.zeros((4, 3)), covs=covs
        )
        lam = np.linalg.eigvalsh(seq.covs)
        assert np.min(lam) >= 0.0

    def test_rejects_indefinite(self):
        covs = np.repeat(np.diag([0.01, 0.01, -0.5])[None], 2, axis=0)
        with pytest.raises(ValueError):
            PredictedRegionSequence(
                times=np.arange(2.0), means=np.zeros((2, 3)), covs=covs
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            PredictedRegionSequence(
                times=np.arange(3.0),
                means=np.zeros((2, 3)),
                covs=np.zeros((3, 3, 3)),
            )
