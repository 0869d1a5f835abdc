"""Student-t predictive mixture and its history-conditioned form.

Integrating the component Gaussians against the fitted Normal-Wishart
posterior yields a mixture of multivariate Student-t densities; fixing
the history block of the feature vector reweights the components and
produces per-component conditional means and covariances, which pool
into a single Gaussian summary (mean plus moment-matched covariance)
for downstream constraint construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln, logsumexp

from .vbgmm import VbgmmPosterior


@dataclass(frozen=True)
class StudentMixture:
    """Mixture of multivariate Student-t components.

    Attributes:
        weights: shape (K,), non-negative, sum 1.
        means: shape (K, D).
        precisions: shape (K, D, D), SPD precision parameters.
        dofs: shape (K,), positive degrees of freedom.
        nu: shape (K,), underlying Wishart degrees of freedom per
            component (the conditioning formulas need them alongside
            the predictive dofs).
    """

    weights: NDArray
    means: NDArray
    precisions: NDArray
    dofs: NDArray
    nu: NDArray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        p = np.asarray(self.precisions, dtype=float)
        dof = np.asarray(self.dofs, dtype=float)
        nu = np.asarray(self.nu, dtype=float)
        k, d = m.shape
        if w.shape != (k,) or p.shape != (k, d, d) or dof.shape != (k,) or nu.shape != (k,):
            raise ValueError("component arrays disagree in shape")
        if np.any(w < 0) or abs(float(np.sum(w)) - 1.0) > 1e-9:
            raise ValueError("weights must be a distribution")
        if np.any(dof <= 0):
            raise ValueError("degrees of freedom must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "precisions", p)
        object.__setattr__(self, "dofs", dof)
        object.__setattr__(self, "nu", nu)

    @property
    def n_components(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def log_pdf(self, x: NDArray) -> NDArray:
        """Mixture log density at points x of shape (..., D)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts = np.stack(
            [
                np.log(max(self.weights[j], 1e-300))
                + student_log_pdf(x, self.means[j], self.precisions[j], float(self.dofs[j]))
                for j in range(self.n_components)
            ],
            axis=0,
        )
        return logsumexp(parts, axis=0)

    def pdf(self, x: NDArray) -> NDArray:
        return np.exp(self.log_pdf(x))


def student_log_pdf(x: NDArray, mean: NDArray, prec: NDArray, dof: float) -> NDArray:
    """Multivariate Student-t log density, precision parameterization.

    x has shape (N, D); prec is the precision parameter (inverse of the
    scale matrix), so the density is proportional to
    (1 + q/dof)^(-(dof+D)/2) with q the prec-weighted square gap.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = mean.shape[0]
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0:
        raise ValueError("precision matrix must be positive definite")
    diff = x - mean[None, :]
    quad = np.einsum("nd,de,ne->n", diff, prec, diff)
    return (
        gammaln(0.5 * (dof + d))
        - gammaln(0.5 * dof)
        + 0.5 * logdet
        - 0.5 * d * np.log(dof * np.pi)
        - 0.5 * (dof + d) * np.log1p(quad / dof)
    )


def predictive_joint(post: VbgmmPosterior) -> StudentMixture:
    """Posterior predictive density of a new feature vector.

    Component k carries weight alpha_k / sum(alpha), degrees of freedom
    nu_k + 1 - D, and precision ((nu_k + 1 - D) beta_k / (1 + beta_k))
    times the Wishart scale.
    """
    d = post.dim
    dof = post.nu + 1.0 - d
    if np.any(dof <= 0):
        raise ValueError("posterior degrees of freedom too small for a predictive density")
    factor = dof * post.beta / (1.0 + post.beta)
    prec = factor[:, None, None] * post.w
    return StudentMixture(
        weights=post.alpha / float(np.sum(post.alpha)),
        means=post.m.copy(),
        precisions=prec,
        dofs=dof,
        nu=post.nu.copy(),
    )


@dataclass(frozen=True)
class ConditionalPrediction:
    """Future-block prediction given an observed history block.

    Attributes:
        weights: reweighted component responsibilities, shape (K,).
        cond_means: conditional means, shape (K, Df).
        cond_covs: conditional covariances, shape (K, Df, Df).
        cond_dofs: conditional Student-t dofs, shape (K,).
        cond_scales: conditional Student-t scale matrices (inverses of
            the conditional precision parameters), shape (K, Df, Df).
        pooled_mean: weight-averaged mean, shape (Df,).
        pooled_cov: moment-matched mixture covariance, shape (Df, Df).
    """

    weights: NDArray
    cond_means: NDArray
    cond_covs: NDArray
    cond_dofs: NDArray
    cond_scales: NDArray
    pooled_mean: NDArray
    pooled_cov: NDArray

    def log_pdf(self, x_future: NDArray) -> NDArray:
        """Conditional mixture log density over the future block."""
        x = np.atleast_2d(np.asarray(x_future, dtype=float))
        parts = np.stack(
            [
                np.log(max(self.weights[j], 1e-300))
                + student_log_pdf(
                    x, self.cond_means[j], np.linalg.inv(self.cond_scales[j]),
                    float(self.cond_dofs[j]),
                )
                for j in range(self.weights.shape[0])
            ],
            axis=0,
        )
        return logsumexp(parts, axis=0)

    def pdf(self, x_future: NDArray) -> NDArray:
        return np.exp(self.log_pdf(x_future))


def condition_on_history(
    mix: StudentMixture,
    a_h: NDArray,
    history_indices: NDArray | None = None,
) -> ConditionalPrediction:
    """Condition the joint predictive on an observed history block.

    By default a_h fixes the first len(a_h) feature dimensions;
    history_indices selects an arbitrary subset instead, with the
    complement (in ascending order) forming the future block.

    Per component: the weight is reweighted by the history-marginal
    Student-t density (precision inv(S_hh), dof nu+1-D); the mean
    shifts along the cross-scale gain; the Schur-complement scale is
    inflated by 1 + gap^2/(nu+1-D) and carries the (nu+1-D)/(nu-1)
    adjustment; the reported covariance applies the further factor
    (nu-1)/(nu+1); the conditional density dof is nu+1.
    """
    a_h = np.asarray(a_h, dtype=float)
    d = mix.dim
    if a_h.ndim != 1:
        raise ValueError("history vector must be one-dimensional")
    dh = a_h.shape[0]
    if not 0 < dh < d:
        raise ValueError("history must fix a strict non-empty subset of dimensions")
    if history_indices is None:
        perm = np.arange(d)
    else:
        hist = np.asarray(history_indices, dtype=int)
        if hist.shape != (dh,) or len(set(hist.tolist())) != dh:
            raise ValueError("history_indices must list each history dimension once")
        future = np.array([i for i in range(d) if i not in set(hist.tolist())], dtype=int)
        perm = np.concatenate([hist, future])
    df = d - dh
    k = mix.n_components

    log_w = np.empty(k)
    means = np.empty((k, df))
    covs = np.empty((k, df, df))
    scales = np.empty((k, df, df))
    dofs = np.empty(k)
    for j in range(k):
        scale = np.linalg.inv(mix.precisions[j])
        scale = 0.5 * (scale + scale.T)
        scale = scale[np.ix_(perm, perm)]
        mean = mix.means[j][perm]
        s_hh = scale[:dh, :dh]
        s_hf = scale[:dh, dh:]
        s_ff = scale[dh:, dh:]
        m_h = mean[:dh]
        m_f = mean[dh:]
        eta = float(mix.dofs[j])  # nu + 1 - D
        nu = float(mix.nu[j])

        try:
            chol = np.linalg.cholesky(s_hh)
        except np.linalg.LinAlgError:
            s_hh = s_hh + 1e-9 * np.eye(dh)
            chol = np.linalg.cholesky(s_hh)
        gap = a_h - m_h
        half = np.linalg.solve(chol, gap)
        delta = float(half @ half)
        prec_h = np.linalg.inv(s_hh)
        prec_h = 0.5 * (prec_h + prec_h.T)
        log_w[j] = np.log(max(mix.weights[j], 1e-300)) + float(
            student_log_pdf(a_h[None, :], m_h, prec_h, eta)[0]
        )

        gain = np.linalg.solve(s_hh, s_hf).T  # (Df, Dh), equals S_fh S_hh^-1
        means[j] = m_f + gain @ gap
        schur = s_ff - gain @ s_hf
        schur = 0.5 * (schur + schur.T)
        scales[j] = (1.0 + delta / eta) * schur * (eta / (nu - 1.0))
        dofs[j] = nu + 1.0
        covs[j] = scales[j] * ((nu - 1.0) / (nu + 1.0))

    log_w -= logsumexp(log_w)
    w = np.exp(log_w)
    w = w / float(np.sum(w))

    pooled_mean = w @ means
    centered = means - pooled_mean[None, :]
    pooled_cov = np.einsum("k,kde->de", w, covs) + np.einsum(
        "k,kd,ke->de", w, centered, centered
    )
    pooled_cov = 0.5 * (pooled_cov + pooled_cov.T)
    return ConditionalPrediction(
        weights=w,
        cond_means=means,
        cond_covs=covs,
        cond_dofs=dofs,
        cond_scales=scales,
        pooled_mean=pooled_mean,
        pooled_cov=pooled_cov,
    )
