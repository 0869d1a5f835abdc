"""Confidence ellipsoids, projections, and collision halfspaces.

A predicted obstacle position comes with a 3x3 covariance.  The mass-P
confidence region of that Gaussian is an ellipsoid whose radius scaling
solves a closed-form equation in the 3D radial CDF; projecting the
host's planned position onto the ellipsoid yields a supporting
halfspace, and the Gaussian tail bound turns a violation-probability cap
into a deterministic margin on that halfspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf, erfinv
from numpy.typing import NDArray

_GAMMA_3_2 = math.sqrt(math.pi) / 2.0  # Gamma(3/2)
_EIG_FLOOR = 1e-12


class InsideCollisionRegionError(Exception):
    """The queried point already lies inside the confidence ellipsoid.

    No separating halfspace exists; the caller must treat the step as
    violated (e.g. declare the subproblem infeasible or soften it).
    """


def radial_mass(r: float | NDArray) -> NDArray:
    """Probability mass of a standard 3D Gaussian within radius r."""
    r = np.asarray(r, dtype=float)
    s = r / math.sqrt(2.0)
    return erf(s) - s * np.exp(-0.5 * r * r) / _GAMMA_3_2


def _radial_mass_derivative(r: float) -> float:
    e = math.exp(-0.5 * r * r)
    return math.sqrt(2.0 / math.pi) * e + e * (r * r - 1.0) / (
        math.sqrt(2.0) * _GAMMA_3_2
    )


@lru_cache(maxsize=64)
def scaling_factor(confidence: float, tol: float = 1e-10, max_iter: int = 100) -> float:
    """Radius multiplier r with radial_mass(r) = confidence.

    Newton iteration from r = 1.5; if an iterate leaves (0, 20) or the
    iteration budget runs out, a bisection fallback finishes the solve.
    r**2 equals the 3-dof chi-square quantile at the same level.  The
    result is memoized; a closed-loop run asks for the same level at
    every constraint evaluation.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie strictly inside (0, 1)")
    r = 1.5
    for _ in range(max_iter):
        f = float(radial_mass(r)) - confidence
        if abs(f) < tol:
            return r
        d = _radial_mass_derivative(r)
        if d <= 0.0:
            break
        r = r - f / d
        if not 0.0 < r < 20.0:
            break
    # Bisection fallback; radial_mass is strictly increasing.
    lo, hi = 1e-12, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(radial_mass(mid)) < confidence:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    """Confidence region {x : (x-center)^T cov^{-1} (x-center) <= scale^2}.

    Attributes:
        center: 3-vector mean.
        cov: 3x3 symmetric PSD shape matrix (eigenvalues floored at 1e-12).
        scale: radius multiplier from scaling_factor.
        axes_dirs: eigenvector columns, sorted by descending eigenvalue.
        axes_lambda: the matching eigenvalues, descending.
    """

    center: NDArray
    cov: NDArray
    scale: float
    axes_dirs: NDArray
    axes_lambda: NDArray

    @property
    def semi_axes(self) -> NDArray:
        """Semi-axis lengths scale * sqrt(lambda), descending."""
        return self.scale * np.sqrt(self.axes_lambda)

    def mahalanobis_sq(self, point: NDArray) -> float:
        z = self.axes_dirs.T @ (np.asarray(point, dtype=float) - self.center)
        return float(np.sum(z * z / self.axes_lambda))

    def contains(self, point: NDArray) -> bool:
        return self.mahalanobis_sq(point) <= self.scale * self.scale


def ellipsoid_from_gaussian(
    mean: NDArray, cov: NDArray, confidence: float
) -> ConfidenceEllipsoid:
    """Build the mass-`confidence` ellipsoid of N(mean, cov)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape != (3,) or cov.shape != (3, 3):
        raise ValueError("mean must be a 3-vector and cov 3x3")
    if np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, float(np.max(np.abs(cov)))):
        raise ValueError("covariance must be symmetric")
    sym = 0.5 * (cov + cov.T)
    lam, q = np.linalg.eigh(sym)
    if np.min(lam) < -1e-9 * max(1.0, float(np.max(np.abs(lam)))):
        raise ValueError("covariance must be positive semidefinite")
    lam = np.maximum(lam, _EIG_FLOOR)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    q = q[:, order]
    return ConfidenceEllipsoid(
        center=mean,
        cov=q @ np.diag(lam) @ q.T,
        scale=scaling_factor(confidence),
        axes_dirs=q,
        axes_lambda=lam,
    )


def inflate_covariance(cov: NDArray, margin: float, confidence: float) -> NDArray:
    """Covariance whose confidence ellipsoid grows by `margin` per semi-axis.

    The mass-`confidence` ellipsoid of N(mean, cov) has semi-axes
    r*sqrt(lambda_i); returning eigenvalues (sqrt(lambda_i) + margin/r)^2
    extends every semi-axis by exactly `margin`, a tractable stand-in for
    the Minkowski sum with a safety ball.  Degenerate axes stay finite:
    a zero eigenvalue maps to (margin/r)^2.
    """
    if margin < 0.0:
        raise ValueError("margin must be non-negative")
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    lam, q = np.linalg.eigh(sym)
    lam = np.clip(lam, 0.0, None)
    r = scaling_factor(confidence)
    grown = (np.sqrt(lam) + margin / r) ** 2
    return (q * grown) @ q.T


def project_onto_ellipsoid(point: NDArray, ell: ConfidenceEllipsoid) -> NDArray:
    """Closest ellipsoid point to `point` (the point itself if inside).

    Boundary solutions come from the optimality system
    (y - p) + mu * cov^{-1} (y - c) = 0 with the boundary equation, which
    reduces to a scalar root-find in the multiplier mu after rotating
    into the axis frame.  A damped Newton iteration with a bisection
    safeguard solves it to float precision.
    """
    p = np.asarray(point, dtype=float)
    if p.shape != (3,):
        raise ValueError("point must be a 3-vector")
    if ell.contains(p):
        return p.copy()
    z = ell.axes_dirs.T @ (p - ell.center)
    lam = ell.axes_lambda
    r2 = ell.scale * ell.scale

    def boundary_gap(mu: float) -> float:
        w = z * lam / (lam + mu)
        return float(np.sum(w * w / lam)) - r2

    # boundary_gap is strictly decreasing on mu > 0 with a positive value
    # at 0 (point outside), so the root is bracketed by [0, hi].
    hi = 1.0
    while boundary_gap(hi) > 0.0:
        hi *= 4.0
        if hi > 1e18:
            raise RuntimeError("projection multiplier bracket failed")
    lo = 0.0
    mu = min(hi, max(lo, np.linalg.norm(z)))
    for _ in range(200):
        g = boundary_gap(mu)
        if abs(g) < 1e-15 * max(1.0, r2):
            break
        w = z * lam / (lam + mu)
        dg = float(np.sum(-2.0 * w * w / (lam * (lam + mu))))
        if g > 0.0:
            lo = mu
        else:
            hi = mu
        step = g / dg if dg < 0.0 else np.inf
        nxt = mu - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        mu = nxt
    w = z * lam / (lam + mu)
    return ell.center + ell.axes_dirs @ w


def min_distance_to_region(point: NDArray, ell: ConfidenceEllipsoid) -> float:
    """Euclidean distance from point to the ellipsoid (0 if inside)."""
    return float(np.linalg.norm(np.asarray(point, dtype=float) - project_onto_ellipsoid(point, ell)))


@dataclass(frozen=True)
class HalfspaceConstraint:
    """Separating constraint normal^T (x - anchor) >= margin.

    `normal` is the outward unit direction from the ellipsoid surface to
    the queried point, `anchor` is the surface projection, and `margin`
    is the tail-bound back-off enforcing the violation-probability cap.
    """

    normal: NDArray
    anchor: NDArray
    margin: float

    def violation(self, x: NDArray) -> float:
        """Positive when x violates the constraint, by that many meters."""
        return self.margin - float(self.normal @ (np.asarray(x, dtype=float) - self.anchor))


def halfspace_from_ellipsoid(
    point: NDArray,
    ell: ConfidenceEllipsoid,
    tail_cov: NDArray,
    phi: float,
) -> HalfspaceConstraint:
    """Separating halfspace for a prebuilt keep-out ellipsoid.

    Projects `point` onto `ell`, takes the outward normal, and backs the
    plane off by sqrt(2 n^T tail_cov n) * erfinv(1 - 2 phi).  `tail_cov`
    is the (symmetric) covariance of the underlying distribution, which
    may differ from the ellipsoid shape when the region was grown.
    Callers that evaluate many points against one predicted region build
    the ellipsoid once and loop here.

    Raises InsideCollisionRegionError when `point` is inside `ell`: the
    step is already in the collision region and no separating constraint
    exists.
    """
    if not 0.0 < phi <= 0.5:
        raise ValueError("violation probability must lie in (0, 0.5]")
    p = np.asarray(point, dtype=float)
    if ell.contains(p):
        raise InsideCollisionRegionError(
            "query point lies inside the confidence region"
        )
    proj = project_onto_ellipsoid(p, ell)
    gap = p - proj
    nrm = float(np.linalg.norm(gap))
    if nrm < 1e-12:
        raise InsideCollisionRegionError("query point sits on the region boundary")
    normal = gap / nrm
    margin = math.sqrt(max(2.0 * float(normal @ tail_cov @ normal), 0.0)) * float(
        erfinv(1.0 - 2.0 * phi)
    )
    return HalfspaceConstraint(normal=normal, anchor=proj, margin=margin)


def chance_to_halfspace(
    point: NDArray,
    mean: NDArray,
    cov: NDArray,
    confidence: float,
    phi: float,
    grow: float = 0.0,
) -> HalfspaceConstraint:
    """Deterministic halfspace enforcing P(collision side) <= phi.

    Builds the confidence ellipsoid of N(mean, cov), projects `point`
    onto it, takes the outward normal, and backs the plane off by
    sqrt(2 n^T cov n) * erfinv(1 - 2 phi).

    `grow` extends every semi-axis of the keep-out ellipsoid by that many
    meters (a safety-ball stand-in); the probabilistic back-off margin
    still comes from the unmodified distribution.

    Raises InsideCollisionRegionError when `point` is inside the
    (grown) ellipsoid: the step is already in the collision region and
    no separating constraint exists.
    """
    cov = np.asarray(cov, dtype=float)
    region_cov = inflate_covariance(cov, grow, confidence) if grow > 0.0 else cov
    ell = ellipsoid_from_gaussian(mean, region_cov, confidence)
    return halfspace_from_ellipsoid(point, ell, 0.5 * (cov + cov.T), phi)


@dataclass(frozen=True)
class PredictedRegionSequence:
    """Per-step predicted obstacle mean and covariance over a horizon.

    Attributes:
        times: shape (H,) absolute times of the predicted steps.
        means: shape (H, 3) predicted positions.
        covs: shape (H, 3, 3) PSD covariances (eigenvalues clipped >= 0).
    """

    times: NDArray
    means: NDArray
    covs: NDArray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covs, dtype=float)
        h = t.shape[0]
        if m.shape != (h, 3) or c.shape != (h, 3, 3):
            raise ValueError("means (H,3) and covs (H,3,3) must match times")
        sym = 0.5 * (c + np.transpose(c, (0, 2, 1)))
        lam, q = np.linalg.eigh(sym)
        if np.min(lam) < -1e-8 * max(1.0, float(np.max(np.abs(lam)))):
            raise ValueError("covariances must be positive semidefinite")
        lam = np.clip(lam, 0.0, None)
        fixed = np.einsum("hij,hj,hkj->hik", q, lam, q)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", fixed)

    def __len__(self) -> int:
        return int(self.times.shape[0])
