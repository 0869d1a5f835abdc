"""Trajectory windowing, coefficient features, and obstacle prediction.

A trajectory is split into a history window (leading 70% of its span)
and a future window (trailing 40%), which overlap by 10%.  Each window
is rewritten as speed/polar/azimuth channels and each channel fitted
with a degree-4 Chebyshev series, giving a 15-dimensional feature per
window and a 30-dimensional joint vector for mixture training.  Both
windows' azimuths are centered on the history window's mean heading, so
the learned mixture is invariant to world-frame yaw.

Prediction runs the pipeline forward: featurize the recent history
buffer, condition the trained mixture on it, restore the heading
offset, reconstruct the future channels from the conditional
coefficient distribution, and integrate into Cartesian means with
first-order covariance propagation anchored at the last observed
position.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .cheb import basis_matrix, fit_sampled_channel
from .geometry import PredictedRegionSequence
from .student import condition_on_history, predictive_joint
from .trajectories import TrajectorySeries, cartesian_to_spherical
from .vbgmm import VbgmmPosterior

N_CHANNELS = 3


@dataclass(frozen=True)
class FeatureSpec:
    """Window geometry and fit degree for trajectory features.

    Attributes:
        degree: Chebyshev degree per channel.
        n_samples: samples per training trajectory; fixes the window
            sample counts used at prediction time.
        history_fraction: leading share of the trajectory span that
            forms the history window.
        future_fraction: trailing share forming the future window.
        overlap_fraction: share covered by both windows.
    """

    degree: int = 4
    n_samples: int = 201
    history_fraction: float = 0.7
    future_fraction: float = 0.4
    overlap_fraction: float = 0.1

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        for name in ("history_fraction", "future_fraction", "overlap_fraction"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        total = self.history_fraction + self.future_fraction - self.overlap_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError("windows must cover the trajectory exactly once")
        if self.history_samples < self.degree + 2 or self.future_samples < self.degree + 2:
            raise ValueError("windows too short for the fit degree")

    def window_indices(self, n: int) -> tuple[int, int]:
        """(history_end, future_start) sample indices for an n-sample span."""
        last = n - 1
        history_end = int(round(self.history_fraction * last))
        future_start = int(round((self.history_fraction - self.overlap_fraction) * last))
        return history_end, future_start

    @property
    def history_samples(self) -> int:
        history_end, _ = self.window_indices(self.n_samples)
        return history_end + 1

    @property
    def future_samples(self) -> int:
        _, future_start = self.window_indices(self.n_samples)
        return self.n_samples - future_start

    @property
    def now_index(self) -> int:
        """Future-window sample index of the last history sample."""
        history_end, future_start = self.window_indices(self.n_samples)
        return history_end - future_start

    @property
    def max_horizon_steps(self) -> int:
        return self.future_samples - 1 - self.now_index

    @property
    def features_per_window(self) -> int:
        return N_CHANNELS * (self.degree + 1)

    @property
    def joint_dim(self) -> int:
        return 2 * self.features_per_window

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "n_samples": self.n_samples,
            "history_fraction": self.history_fraction,
            "future_fraction": self.future_fraction,
            "overlap_fraction": self.overlap_fraction,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSpec":
        return cls(
            degree=int(doc["degree"]),
            n_samples=int(doc["n_samples"]),
            history_fraction=float(doc["history_fraction"]),
            future_fraction=float(doc["future_fraction"]),
            overlap_fraction=float(doc["overlap_fraction"]),
        )


def _fit_channels(v: NDArray, theta: NDArray, phi: NDArray, degree: int) -> NDArray:
    return np.concatenate(
        [
            fit_sampled_channel(v, degree),
            fit_sampled_channel(theta, degree),
            fit_sampled_channel(phi, degree),
        ]
    )


def _heading_offset(phi_history: NDArray) -> float:
    """Azimuth removed from both windows before fitting.

    Centering on the history window's mean heading makes the features
    invariant to world-frame yaw, so mixture components describe motion
    shapes instead of tiling the compass.  The offset is recoverable
    from the history buffer alone, which is all prediction time has.
    """
    return float(np.mean(phi_history))


def _align_future_branch(
    phi_future: NDArray, phi_history: NDArray, future_start: int
) -> NDArray:
    """Shift the future azimuth onto the history window's unwrap branch.

    Each window unwraps independently from its own first sample, so the
    shared overlap steps agree only up to a whole number of turns; the
    median gap over the overlap estimates that number exactly.
    """
    overlap = phi_history.shape[0] - future_start
    if overlap >= 2:
        gap = phi_future[1:overlap] - phi_history[future_start + 1 :]
    else:
        gap = phi_future[:1] - phi_history[-1:]
    turns = np.round(np.median(gap) / (2.0 * np.pi))
    return phi_future - 2.0 * np.pi * turns


def _slice_series(traj: TrajectorySeries, start: int, stop: int) -> TrajectorySeries:
    return TrajectorySeries(times=traj.times[start:stop], positions=traj.positions[start:stop])


def featurize_trajectory(
    traj: TrajectorySeries, spec: FeatureSpec
) -> tuple[NDArray, NDArray]:
    """History and future feature vectors of a full trajectory.

    Window boundaries scale with the actual trajectory length, so
    trajectories of any sufficient length can be featurized; training
    corpora normally use spec.n_samples throughout.
    """
    n = len(traj)
    history_end, future_start = spec.window_indices(n)
    if history_end + 1 < spec.degree + 2 or n - future_start < spec.degree + 2:
        raise ValueError("trajectory too short to fill the feature windows")
    ch_h = cartesian_to_spherical(_slice_series(traj, 0, history_end + 1))
    psi0 = _heading_offset(ch_h.phi)
    a_h = _fit_channels(ch_h.v, ch_h.theta, ch_h.phi - psi0, spec.degree)
    ch_f = cartesian_to_spherical(_slice_series(traj, future_start, n))
    phi_f = _align_future_branch(ch_f.phi, ch_h.phi, future_start)
    a_f = _fit_channels(ch_f.v, ch_f.theta, phi_f - psi0, spec.degree)
    return a_h, a_f


def build_training_matrix(
    trajectories: list[TrajectorySeries], spec: FeatureSpec
) -> NDArray:
    """Stack joint (history, future) features, one row per trajectory."""
    rows = []
    for traj in trajectories:
        a_h, a_f = featurize_trajectory(traj, spec)
        rows.append(np.concatenate([a_h, a_f]))
    return np.asarray(rows)


def _future_nodes(spec: FeatureSpec) -> NDArray:
    return np.linspace(-1.0, 1.0, spec.future_samples)


def channel_bands(
    mean_coeffs: NDArray, cov_coeffs: NDArray, spec: FeatureSpec
) -> dict[str, tuple[NDArray, NDArray]]:
    """Per-channel mean and variance over the future window samples.

    The reconstruction is linear in the coefficients, so means map
    through the basis matrix and covariances through its congruence.
    Returns {"v" | "theta" | "phi": (mean, variance)} arrays of length
    future_samples.
    """
    p = spec.degree + 1
    if mean_coeffs.shape != (N_CHANNELS * p,) or cov_coeffs.shape != (
        N_CHANNELS * p,
        N_CHANNELS * p,
    ):
        raise ValueError("coefficient moments do not match the feature spec")
    basis = basis_matrix(spec.degree, _future_nodes(spec))
    out = {}
    for idx, name in enumerate(("v", "theta", "phi")):
        sl = slice(idx * p, (idx + 1) * p)
        mean = basis @ mean_coeffs[sl]
        var = np.einsum("nd,de,ne->n", basis, cov_coeffs[sl, sl], basis)
        out[name] = (mean, np.clip(var, 0.0, None))
    return out


def propagate_future(
    mean_coeffs: NDArray,
    cov_coeffs: NDArray,
    start: NDArray,
    t_start: float,
    dt: float,
    horizon_steps: int,
    spec: FeatureSpec,
) -> PredictedRegionSequence:
    """Integrate the future-channel distribution into Cartesian regions.

    The mean path integrates the reconstructed channels step by step
    from the anchor position; the covariance propagates through the
    first-order Jacobian of the same cumulative map.  Steps start one
    dt after t_start and end at horizon_steps dt.
    """
    p = spec.degree + 1
    dim = N_CHANNELS * p
    mean_coeffs = np.asarray(mean_coeffs, dtype=float)
    cov_coeffs = np.asarray(cov_coeffs, dtype=float)
    if mean_coeffs.shape != (dim,) or cov_coeffs.shape != (dim, dim):
        raise ValueError("coefficient moments do not match the feature spec")
    if not 1 <= horizon_steps <= spec.max_horizon_steps:
        raise ValueError(
            f"horizon must lie in [1, {spec.max_horizon_steps}] future steps"
        )
    start = np.asarray(start, dtype=float)

    basis = basis_matrix(spec.degree, _future_nodes(spec))
    a_v = mean_coeffs[0:p]
    a_th = mean_coeffs[p : 2 * p]
    a_ph = mean_coeffs[2 * p : 3 * p]
    v = basis @ a_v
    th = basis @ a_th
    ph = basis @ a_ph
    sin_t, cos_t = np.sin(th), np.cos(th)
    sin_p, cos_p = np.sin(ph), np.cos(ph)
    u = np.stack([sin_t * cos_p, sin_t * sin_p, cos_t], axis=1)
    du_dth = np.stack([cos_t * cos_p, cos_t * sin_p, -sin_t], axis=1)
    du_dph = np.stack([-sin_t * sin_p, sin_t * cos_p, np.zeros_like(th)], axis=1)

    times = np.empty(horizon_steps)
    means = np.empty((horizon_steps, 3))
    covs = np.empty((horizon_steps, 3, 3))
    pos = start.copy()
    jac = np.zeros((3, dim))
    clipped = False
    for k in range(1, horizon_steps + 1):
        j = spec.now_index + k
        pos = pos + dt * v[j] * u[j]
        step_jac = np.zeros((3, dim))
        step_jac[:, 0:p] = np.outer(u[j], basis[j])
        step_jac[:, p : 2 * p] = v[j] * np.outer(du_dth[j], basis[j])
        step_jac[:, 2 * p : 3 * p] = v[j] * np.outer(du_dph[j], basis[j])
        jac = jac + dt * step_jac
        cov = jac @ cov_coeffs @ jac.T
        cov = 0.5 * (cov + cov.T)
        lam = np.linalg.eigvalsh(cov)
        if lam[0] < -1e-10 * max(1.0, float(lam[-1])):
            clipped = True
        times[k - 1] = t_start + k * dt
        means[k - 1] = pos
        covs[k - 1] = cov
    if clipped:
        warnings.warn("propagated covariance lost definiteness; clipping to PSD")
        for k in range(horizon_steps):
            lam, q = np.linalg.eigh(covs[k])
            covs[k] = (q * np.clip(lam, 0.0, None)) @ q.T
    return PredictedRegionSequence(times=times, means=means, covs=covs)


def predict_obstacle(
    posterior: VbgmmPosterior,
    history: TrajectorySeries,
    horizon_steps: int,
    dt: float,
    spec: FeatureSpec | None = None,
) -> PredictedRegionSequence:
    """Predicted obstacle regions over the next horizon_steps samples.

    The trailing history-window worth of the buffer is featurized, the
    trained mixture conditioned on it, and the pooled conditional
    coefficient moments pushed through channel reconstruction and
    cumulative integration.  The prediction is anchored at the last
    observed position.
    """
    if spec is None:
        spec = FeatureSpec()
    if posterior.dim != spec.joint_dim:
        raise ValueError("posterior dimension does not match the feature spec")
    n_h = spec.history_samples
    if len(history) < n_h:
        raise ValueError(
            f"history buffer needs at least {n_h} samples, got {len(history)}"
        )
    if abs(history.dt - dt) > 1e-9 * max(1.0, dt):
        raise ValueError("history sampling interval does not match dt")

    window = _slice_series(history, len(history) - n_h, len(history))
    ch = cartesian_to_spherical(window)
    psi0 = _heading_offset(ch.phi)
    a_h = _fit_channels(ch.v, ch.theta, ch.phi - psi0, spec.degree)
    cond = condition_on_history(predictive_joint(posterior), a_h)
    mean = np.asarray(cond.pooled_mean, dtype=float).copy()
    # undo the heading centering: a constant shift is 2*psi0 on the
    # leading coefficient under the halved-a0 fit convention
    mean[2 * (spec.degree + 1)] += 2.0 * psi0
    return propagate_future(
        mean,
        cond.pooled_cov,
        start=history.positions[-1],
        t_start=float(history.times[-1]),
        dt=dt,
        horizon_steps=horizon_steps,
        spec=spec,
    )
