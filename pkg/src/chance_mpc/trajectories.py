"""Trajectory containers and the Cartesian/spherical channel transform.

A trajectory is a uniformly timed 3D position series.  For learning,
each step displacement is rewritten as speed plus two direction angles
(polar from +z, azimuth in the xy plane).  Channel entry k describes the
step that ends at sample k; entry 0 pads the first sample with the first
step's value so channels and positions stay the same length, and the
reverse transform therefore skips entry 0 when integrating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

# Steps shorter than this carry no usable direction; angles are held.
_DEGENERATE_STEP = 1e-9


@dataclass(frozen=True)
class TrajectorySeries:
    """Uniformly sampled positions with their timestamps.

    Attributes:
        times: shape (n,), strictly increasing, uniform spacing.
        positions: shape (n, 3) Cartesian positions in meters.
    """

    times: NDArray
    positions: NDArray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.positions, dtype=float)
        if t.ndim != 1 or p.ndim != 2 or p.shape != (t.shape[0], 3):
            raise ValueError("times (n,) and positions (n, 3) must align")
        if t.shape[0] < 2:
            raise ValueError("need at least two samples")
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(dt[0])):
            raise ValueError("timestamps must be uniformly spaced")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self) -> int:
        return int(self.times.shape[0])


@dataclass(frozen=True)
class SphericalChannels:
    """Per-sample motion channels (speed, polar angle, azimuth).

    Attributes:
        v: shape (n,) speeds in m/s, non-negative.
        theta: shape (n,) polar angles from the +z axis, radians.
        phi: shape (n,) azimuth angles in the xy plane, radians.
    """

    v: NDArray
    theta: NDArray
    phi: NDArray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        th = np.asarray(self.theta, dtype=float)
        ph = np.asarray(self.phi, dtype=float)
        if not (v.shape == th.shape == ph.shape) or v.ndim != 1:
            raise ValueError("channels must be equal-length vectors")
        if v.shape[0] < 2:
            raise ValueError("need at least two channel samples")
        if np.any(v < 0):
            raise ValueError("speeds must be non-negative")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "phi", ph)

    def __len__(self) -> int:
        return int(self.v.shape[0])

    def stacked(self) -> NDArray:
        """(n, 3) array with columns v, theta, phi."""
        return np.stack([self.v, self.theta, self.phi], axis=1)


def cartesian_to_spherical(traj: TrajectorySeries) -> SphericalChannels:
    """Rewrite step displacements as (speed, polar, azimuth) channels.

    The step from sample k-1 to k gives channel entry k; entry 0
    duplicates entry 1 so the output keeps the trajectory's length.
    Steps shorter than 1e-9 m keep the previous direction (zeros if no
    direction was seen yet) and their speed from the displacement norm.
    The azimuth channel is unwrapped so a heading drifting across the
    +-pi cut stays continuous and polynomial fits of it stay tame.
    """
    p = traj.positions
    dt = traj.dt
    d = np.diff(p, axis=0)  # (n-1, 3), row k-1 ends at sample k
    norms = np.linalg.norm(d, axis=1)
    n = len(traj)
    v = np.empty(n)
    theta = np.empty(n)
    phi = np.empty(n)
    prev_theta = 0.0
    prev_phi = 0.0
    for k in range(1, n):
        step = d[k - 1]
        nrm = norms[k - 1]
        v[k] = nrm / dt
        if nrm < _DEGENERATE_STEP:
            theta[k] = prev_theta
            phi[k] = prev_phi
        else:
            theta[k] = np.arccos(np.clip(step[2] / nrm, -1.0, 1.0))
            phi[k] = np.arctan2(step[1], step[0])
            prev_theta = theta[k]
            prev_phi = phi[k]
    v[0] = v[1]
    theta[0] = theta[1]
    phi[0] = phi[1]
    phi = np.unwrap(phi)
    return SphericalChannels(v=v, theta=theta, phi=phi)


def spherical_to_cartesian(
    channels: SphericalChannels, start: NDArray, dt: float
) -> TrajectorySeries:
    """Integrate channels back into positions from a start point.

    p_k = p_{k-1} + dt * v_k * (sin th_k cos ph_k, sin th_k sin ph_k,
    cos th_k) for k >= 1; entry 0 is the padding slot and is not
    consumed.  Composed with cartesian_to_spherical this reproduces the
    original positions exactly up to float rounding.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    p0 = np.asarray(start, dtype=float)
    if p0.shape != (3,):
        raise ValueError("start must be a 3-vector")
    n = len(channels)
    sin_t = np.sin(channels.theta)
    dirs = np.stack(
        [sin_t * np.cos(channels.phi), sin_t * np.sin(channels.phi), np.cos(channels.theta)],
        axis=1,
    )
    steps = dt * channels.v[:, None] * dirs  # row k = step ending at sample k
    pos = np.empty((n, 3))
    pos[0] = p0
    pos[1:] = p0 + np.cumsum(steps[1:], axis=0)
    times = dt * np.arange(n, dtype=float)
    return TrajectorySeries(times=times, positions=pos)
