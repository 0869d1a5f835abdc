"""Chebyshev polynomial evaluation and node-based series fitting.

Trajectory channels are compressed into low-order Chebyshev series on
[-1, 1].  Fitting uses the discrete orthogonality of the polynomials of
the first kind at the classic nodes x_k = cos(pi*(k+1/2)/N), so a fit is
a single weighted sum rather than a linear solve.  Reconstruction halves
the leading coefficient, matching that fit convention.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

# Beyond this the recurrence argument is out of domain rather than
# slightly off through float noise.
_DOMAIN_SLACK = 1e-12


def cheb_eval(degree: int, x: float | NDArray) -> NDArray:
    """Evaluate T_0..T_degree at x via the three-term recurrence.

    Parameters
    ----------
    degree : highest polynomial order, >= 0.
    x : scalar or array of points in [-1, 1] (small float slack allowed).

    Returns
    -------
    Array with shape (degree+1,) + shape(x); row j holds T_j(x).
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    xs = np.asarray(x, dtype=float)
    if np.any(np.abs(xs) > 1.0 + _DOMAIN_SLACK):
        raise ValueError("evaluation point outside [-1, 1]")
    out = np.empty((degree + 1,) + xs.shape, dtype=float)
    out[0] = 1.0
    if degree >= 1:
        out[1] = xs
    for n in range(2, degree + 1):
        out[n] = 2.0 * xs * out[n - 1] - out[n - 2]
    return out


def cheb_nodes(n: int) -> NDArray:
    """Chebyshev nodes x_k = cos(pi*(k+1/2)/n), k = 0..n-1, descending in x."""
    if n < 1:
        raise ValueError("need at least one node")
    k = np.arange(n, dtype=float)
    return np.cos(np.pi * (k + 0.5) / n)


def cheb_fit(samples: NDArray, degree: int) -> NDArray:
    """Fit series coefficients from samples taken at the Chebyshev nodes.

    The j-th coefficient is (2/N) * sum_k f(x_k) T_j(x_k), which is the
    discrete-orthogonality projection.  The caller must supply the sample
    values in node order (cheb_nodes(N)).

    Parameters
    ----------
    samples : length-N values of the target at cheb_nodes(N).
    degree : highest coefficient order; must satisfy degree < N.

    Returns
    -------
    Coefficient vector a_0..a_degree.  Use cheb_reconstruct to evaluate
    the fitted series (a_0 enters halved there).
    """
    f = np.asarray(samples, dtype=float)
    if f.ndim != 1:
        raise ValueError("samples must be one-dimensional")
    n = f.shape[0]
    if degree >= n:
        raise ValueError(f"degree {degree} needs more than {n} node samples")
    t = cheb_eval(degree, cheb_nodes(n))  # (degree+1, n)
    return (2.0 / n) * t @ f


def cheb_reconstruct(coeffs: NDArray, x: float | NDArray) -> NDArray:
    """Evaluate the fitted series a_0/2 + sum_{j>=1} a_j T_j(x)."""
    a = np.asarray(coeffs, dtype=float)
    if a.ndim != 1 or a.shape[0] == 0:
        raise ValueError("coefficient vector must be one-dimensional and non-empty")
    t = cheb_eval(a.shape[0] - 1, x)
    half = a.copy()
    half[0] *= 0.5
    return np.tensordot(half, t, axes=(0, 0))


def affine_to_unit(t: NDArray, t_lo: float, t_hi: float) -> NDArray:
    """Map times in [t_lo, t_hi] onto [-1, 1]."""
    if not t_hi > t_lo:
        raise ValueError("degenerate time window")
    return 2.0 * (np.asarray(t, dtype=float) - t_lo) / (t_hi - t_lo) - 1.0


def unit_to_affine(x: NDArray, t_lo: float, t_hi: float) -> NDArray:
    """Inverse of affine_to_unit."""
    if not t_hi > t_lo:
        raise ValueError("degenerate time window")
    return t_lo + (np.asarray(x, dtype=float) + 1.0) * 0.5 * (t_hi - t_lo)


def fit_sampled_channel(values: NDArray, degree: int) -> NDArray:
    """Fit a uniformly sampled channel by interpolating onto the nodes.

    The sample index axis is mapped affinely onto [-1, 1]; values at the
    N Chebyshev nodes (N = sample count) are obtained by linear
    interpolation, then projected with cheb_fit.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError("need at least two channel samples")
    n = v.shape[0]
    grid = np.linspace(-1.0, 1.0, n)
    nodes = cheb_nodes(n)
    # np.interp wants ascending abscissae; nodes are descending.
    node_vals = np.interp(nodes[::-1], grid, v)[::-1]
    return cheb_fit(node_vals, degree)


def basis_matrix(degree: int, x: NDArray) -> NDArray:
    """Rows map a coefficient vector to series values at x.

    Row i is [T_0(x_i)/2, T_1(x_i), ..., T_degree(x_i)], so
    basis_matrix(d, x) @ a == cheb_reconstruct(a, x).
    """
    t = cheb_eval(degree, np.asarray(x, dtype=float)).T
    t = np.atleast_2d(t)
    out = t.copy()
    out[:, 0] *= 0.5
    return out
