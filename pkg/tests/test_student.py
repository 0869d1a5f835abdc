"""Tests for the predictive Student-t mixture and its conditional."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chance_mpc.student import (
    StudentMixture,
    condition_on_history,
    predictive_joint,
    student_log_pdf,
)
from chance_mpc.vbgmm import VbgmmPosterior, VbgmmPrior


def make_posterior(alpha, beta, nu, means, scales_w):
    """Hand-built posterior with explicit per-component parameters."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    k, d = means.shape
    prior = VbgmmPrior(
        alpha0=1.0, beta0=1.0, nu0=float(d), m0=np.zeros(d), w0=np.eye(d), k_init=k,
    )
    return VbgmmPosterior(
        prior=prior,
        alpha=np.asarray(alpha, dtype=float),
        beta=np.asarray(beta, dtype=float),
        nu=np.asarray(nu, dtype=float),
        m=means,
        w=np.asarray(scales_w, dtype=float),
        n_samples=100,
    )


def single_component_posterior(nu, beta, cov, mean):
    """Posterior whose predictive component has scale matrix cov."""
    d = len(mean)
    eta = nu + 1.0 - d
    w = np.linalg.inv(np.asarray(cov, dtype=float)) / (eta * beta / (1.0 + beta))
    return make_posterior([2.0], [beta], [nu], [mean], [w])


class TestStudentLogPdf:
    def test_univariate_matches_scipy(self):
        from scipy.stats import t as student_t

        x = np.linspace(-4.0, 4.0, 50)
        for dof, loc, scale in [(3.0, 0.5, 1.2), (11.0, -1.0, 0.4)]:
            prec = np.array([[1.0 / scale**2]])
            ours = student_log_pdf(x[:, None], np.array([loc]), prec, dof)
            ref = student_t.logpdf(x, df=dof, loc=loc, scale=scale)
            assert np.allclose(ours, ref, atol=1e-12)

    def test_rejects_indefinite_precision(self):
        with pytest.raises(ValueError):
            student_log_pdf(np.zeros((1, 2)), np.zeros(2),
                            np.array([[1.0, 2.0], [2.0, 1.0]]), 5.0)


class TestPredictiveJoint:
    def test_single_component_weight_is_one(self):
        post = make_posterior([3.7], [2.0], [10.0], [[0.0, 0.0]], [np.eye(2)])
        mix = predictive_joint(post)
        assert mix.weights.tolist() == [1.0]

    def test_dof_and_precision_formulas(self):
        w = np.array([[2.0, 0.3], [0.3, 1.5]])
        post = make_posterior([1.0, 3.0], [4.0, 9.0], [12.0, 7.0],
                              [[0.0, 0.0], [1.0, 1.0]], [w, np.eye(2)])
        mix = predictive_joint(post)
        assert np.allclose(mix.weights, [0.25, 0.75], atol=1e-15)
        assert np.allclose(mix.dofs, [11.0, 6.0])
        expect0 = (11.0 * 4.0 / 5.0) * w
        expect1 = (6.0 * 9.0 / 10.0) * np.eye(2)
        assert np.allclose(mix.precisions[0], expect0, atol=1e-12)
        assert np.allclose(mix.precisions[1], expect1, atol=1e-12)

    def test_large_beta_limit(self):
        w = np.array([[1.0, 0.2], [0.2, 0.8]])
        post = make_posterior([1.0], [1e12], [9.0], [[0.0, 0.0]], [w])
        mix = predictive_joint(post)
        assert np.allclose(mix.precisions[0], 8.0 * w, rtol=1e-9)

    def test_insufficient_dof_rejected(self):
        post = make_posterior([1.0], [1.0], [1.0], [[0.0, 0.0]], [np.eye(2)])
        with pytest.raises(ValueError):
            predictive_joint(post)

    def test_density_integrates_to_one(self):
        post = make_posterior(
            [2.0, 1.0], [5.0, 3.0], [8.0, 12.0],
            [[-0.5, 0.2], [0.8, -0.4]],
            [np.eye(2), np.array([[1.4, -0.3], [-0.3, 0.9]])],
        )
        mix = predictive_joint(post)
        grid = np.linspace(-9.0, 9.0, 601)
        xx, yy = np.meshgrid(grid, grid)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        density = mix.pdf(pts).reshape(xx.shape)
        mass = np.trapezoid(np.trapezoid(density, grid, axis=1), grid)
        assert mass == pytest.approx(1.0, abs=1e-3)


class TestConditionOnHistory:
    def test_at_mean_recovers_future_mean(self):
        cov = np.array([
            [1.0, 0.3, -0.2],
            [0.3, 2.0, 0.4],
            [-0.2, 0.4, 1.5],
        ])
        mean = np.array([0.7, -1.1, 2.3])
        post = single_component_posterior(nu=40.0, beta=30.0, cov=cov, mean=mean)
        mix = predictive_joint(post)
        cond = condition_on_history(mix, mean[:1])
        assert np.allclose(cond.cond_means[0], mean[1:], atol=1e-12)
        # zero history gap means no quadratic inflation
        nu, d = 40.0, 3
        eta = nu + 1.0 - d
        schur = cov[1:, 1:] - np.outer(cov[1:, 0], cov[0, 1:]) / cov[0, 0]
        expect_scale = schur * (eta / (nu - 1.0))
        assert np.allclose(cond.cond_scales[0], expect_scale, atol=1e-12)
        assert np.allclose(cond.cond_covs[0],
                           expect_scale * ((nu - 1.0) / (nu + 1.0)), atol=1e-12)
        assert cond.cond_dofs[0] == pytest.approx(nu + 1.0)

    def test_gaussian_limit_matches_linear_conditional(self):
        cov = np.array([
            [1.2, 0.5, 0.1],
            [0.5, 1.8, -0.3],
            [0.1, -0.3, 0.9],
        ])
        mean = np.array([0.0, 1.0, -1.0])
        post = single_component_posterior(nu=1e6, beta=1e6, cov=cov, mean=mean)
        mix = predictive_joint(post)
        a_h = np.array([0.8])
        cond = condition_on_history(mix, a_h)
        gain = cov[1:, :1] / cov[0, 0]
        expect_mean = mean[1:] + (gain * (a_h[0] - mean[0])).ravel()
        assert np.allclose(cond.cond_means[0], expect_mean, atol=1e-6)
        schur = cov[1:, 1:] - gain @ cov[:1, 1:]
        assert np.allclose(cond.cond_covs[0], schur, rtol=1e-3)

    @pytest.mark.parametrize(
        "nu,beta,rho,offset",
        [
            (300.0, 200.0, 0.3, 0.5),
            (500.0, 400.0, 0.5, 1.0),
            (250.0, 150.0, -0.4, 1.5),
            (800.0, 600.0, 0.6, 2.0),
        ],
    )
    def test_grid_conditioning_oracle(self, nu, beta, rho, offset):
        """Conditional density vs normalized joint slice, 2000-point grid.

        High degrees of freedom mirror a trained posterior, where the
        per-component effective sample count reaches the hundreds.
        """
        mean = np.array([0.4, -0.7])
        cov = np.array([[1.0, rho], [rho, 1.0]])
        post = single_component_posterior(nu=nu, beta=beta, cov=cov, mean=mean)
        mix = predictive_joint(post)
        a_h = np.array([mean[0] + offset])
        cond = condition_on_history(mix, a_h)
        grid = np.linspace(mean[1] - 8.0, mean[1] + 8.0, 2000)
        pts = np.column_stack([np.full_like(grid, a_h[0]), grid])
        joint = mix.pdf(pts)
        slice_pdf = joint / np.trapezoid(joint, grid)
        cond_pdf = cond.pdf(grid[:, None])
        assert float(np.max(np.abs(cond_pdf - slice_pdf))) < 1e-3
        # sanity: the densities compared are order one, not vacuously tiny
        assert slice_pdf.max() > 0.1

    def test_conditional_density_normalized(self):
        post = make_posterior(
            [2.0, 3.0], [150.0, 220.0], [180.0, 260.0],
            [[0.0, 0.0, 0.5], [1.0, -0.5, 0.0]],
            [np.eye(3) * 2.0, np.eye(3) * 3.0],
        )
        mix = predictive_joint(post)
        cond = condition_on_history(mix, np.array([0.3, -0.1]))
        grid = np.linspace(-6.0, 6.0, 4001)
        pdf = cond.pdf(grid[:, None])
        assert np.trapezoid(pdf, grid) == pytest.approx(1.0, abs=1e-3)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5.0, 5.0), min_size=2, max_size=2))
    def test_weights_normalized_for_any_history(self, ah_vals):
        post = make_posterior(
            [1.0, 2.0, 0.5], [10.0, 20.0, 5.0], [30.0, 25.0, 40.0],
            [[0.0, 0.0, 0.0, 0.0], [2.0, 1.0, -1.0, 0.5], [-1.0, 3.0, 0.0, 1.0]],
            [np.eye(4), np.eye(4) * 0.5, np.eye(4) * 2.0],
        )
        mix = predictive_joint(post)
        cond = condition_on_history(mix, np.array(ah_vals))
        assert abs(float(np.sum(cond.weights)) - 1.0) < 1e-12
        assert np.all(cond.weights >= 0)

    def test_pooled_cov_psd_and_formula(self):
        post = make_posterior(
            [1.0, 4.0], [50.0, 80.0], [60.0, 90.0],
            [[0.0, 1.0, 2.0], [3.0, -1.0, 0.0]],
            [np.eye(3), np.eye(3) * 0.7],
        )
        mix = predictive_joint(post)
        cond = condition_on_history(mix, np.array([0.5]))
        assert np.allclose(cond.pooled_cov, cond.pooled_cov.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(cond.pooled_cov)) >= -1e-10
        expect_mean = cond.weights @ cond.cond_means
        assert np.allclose(cond.pooled_mean, expect_mean, atol=1e-12)
        expect_cov = np.zeros((2, 2))
        for j in range(2):
            gap = cond.cond_means[j] - expect_mean
            expect_cov += cond.weights[j] * (cond.cond_covs[j] + np.outer(gap, gap))
        assert np.allclose(cond.pooled_cov, expect_cov, atol=1e-12)

    def test_component_permutation_invariance(self):
        means = np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 0.0], [1.0, 1.0, 1.0]])
        ws = np.stack([np.eye(3), np.eye(3) * 0.7, np.eye(3) * 1.3])
        post = make_posterior([1.0, 4.0, 2.0], [50.0, 80.0, 60.0],
                              [60.0, 90.0, 70.0], means, ws)
        perm = [2, 0, 1]
        post_p = make_posterior(
            np.array([1.0, 4.0, 2.0])[perm], np.array([50.0, 80.0, 60.0])[perm],
            np.array([60.0, 90.0, 70.0])[perm], means[perm], ws[perm])
        a_h = np.array([0.4])
        cond = condition_on_history(predictive_joint(post), a_h)
        cond_p = condition_on_history(predictive_joint(post_p), a_h)
        assert np.allclose(cond.pooled_mean, cond_p.pooled_mean, atol=1e-12)
        assert np.allclose(cond.pooled_cov, cond_p.pooled_cov, atol=1e-12)

    def test_history_indices_permutation(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(4, 4))
        cov = a @ a.T + 4.0 * np.eye(4)
        mean = np.array([1.0, -2.0, 0.5, 3.0])
        post = single_component_posterior(nu=50.0, beta=40.0, cov=cov, mean=mean)
        mix = predictive_joint(post)
        # condition on dims 1 and 3 instead of the leading block
        a_h = np.array([-1.5, 2.5])
        cond = condition_on_history(mix, a_h, history_indices=np.array([1, 3]))
        # reference: permute the joint so those dims lead, then condition
        perm = [1, 3, 0, 2]
        post_p = single_component_posterior(
            nu=50.0, beta=40.0, cov=cov[np.ix_(perm, perm)], mean=mean[perm])
        cond_ref = condition_on_history(predictive_joint(post_p), a_h)
        assert np.allclose(cond.cond_means, cond_ref.cond_means, atol=1e-10)
        assert np.allclose(cond.cond_covs, cond_ref.cond_covs, atol=1e-10)

    def test_rejects_bad_history_sizes(self):
        post = make_posterior([1.0], [10.0], [20.0], [[0.0, 0.0]], [np.eye(2)])
        mix = predictive_joint(post)
        with pytest.raises(ValueError):
            condition_on_history(mix, np.zeros(2))
        with pytest.raises(ValueError):
            condition_on_history(mix, np.zeros((1, 1)))
        with pytest.raises(ValueError):
            condition_on_history(mix, np.zeros(1), history_indices=np.array([0, 1]))
