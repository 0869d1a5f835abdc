import numpy as np
import pytest

from chance_mpc.trajectories import (
    SphericalChannels,
    TrajectorySeries,
    cartesian_to_spherical,
    spherical_to_cartesian,
)


def make_traj(positions, dt=0.1):
    positions = np.asarray(positions, dtype=float)
    times = dt * np.arange(positions.shape[0])
    return TrajectorySeries(times=times, positions=positions)


class TestContainers:
    def test_rejects_nonuniform_times(self):
        with pytest.raises(ValueError):
            TrajectorySeries(
                times=np.array([0.0, 0.1, 0.3]), positions=np.zeros((3, 3))
            )

    def test_rejects_decreasing_times(self):
        with pytest.raises(ValueError):
            TrajectorySeries(
                times=np.array([0.0, -0.1, -0.2]), positions=np.zeros((3, 3))
            )

    def test_rejects_negative_speed(self):
        with pytest.raises(ValueError):
            SphericalChannels(
                v=np.array([1.0, -0.1]), theta=np.zeros(2), phi=np.zeros(2)
            )

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            SphericalChannels(v=np.ones(3), theta=np.ones(2), phi=np.ones(3))


class TestCartesianToSpherical:
    def test_straight_line_along_x(self):
        p = np.zeros((11, 3))
        p[:, 0] = 0.1 * np.arange(11)  # 1 m/s with dt = 0.1
        ch = cartesian_to_spherical(make_traj(p))
        assert np.allclose(ch.v, 1.0, atol=1e-12)
        assert np.allclose(ch.theta, np.pi / 2, atol=1e-12)
        assert np.allclose(ch.phi, 0.0, atol=1e-12)

    def test_straight_line_along_z(self):
        p = np.zeros((6, 3))
        p[:, 2] = 0.05 * np.arange(6)
        ch = cartesian_to_spherical(make_traj(p))
        assert np.allclose(ch.theta, 0.0, atol=1e-12)
        assert np.allclose(ch.v, 0.5, atol=1e-12)

    def test_length_preserved_by_duplication(self):
        rng = np.random.default_rng(0)
        p = np.cumsum(rng.normal(size=(9, 3)), axis=0)
        ch = cartesian_to_spherical(make_traj(p))
        assert len(ch) == 9
        assert ch.v[0] == ch.v[1]
        assert ch.theta[0] == ch.theta[1]
        assert ch.phi[0] == ch.phi[1]

    def test_degenerate_step_holds_direction(self):
        p = np.array(
            [[0, 0, 0], [1, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float
        )
        ch = cartesian_to_spherical(make_traj(p, dt=1.0))
        assert ch.v[2] == pytest.approx(0.0, abs=1e-12)
        assert ch.theta[2] == pytest.approx(np.pi / 2)
        assert ch.phi[2] == pytest.approx(0.0)


class TestSphericalToCartesian:
    def test_ten_steps_along_x(self):
        n = 11  # entry 0 pads; ten integration steps follow
        ch = SphericalChannels(
            v=np.ones(n), theta=np.full(n, np.pi / 2), phi=np.zeros(n)
        )
        traj = spherical_to_cartesian(ch, start=np.zeros(3), dt=0.1)
        assert np.allclose(traj.positions[-1], [1.0, 0.0, 0.0], atol=1e-12)
        assert len(traj) == n

    def test_zero_speed_stays_at_start(self):
        n = 7
        ch = SphericalChannels(v=np.zeros(n), theta=np.ones(n), phi=np.ones(n))
        traj = spherical_to_cartesian(ch, start=np.array([1.0, 2.0, 3.0]), dt=0.05)
        assert np.allclose(traj.positions, [1.0, 2.0, 3.0], atol=1e-12)

    def test_bad_dt(self):
        ch = SphericalChannels(v=np.ones(3), theta=np.ones(3), phi=np.ones(3))
        with pytest.raises(ValueError):
            spherical_to_cartesian(ch, start=np.zeros(3), dt=0.0)


class TestRoundTrip:
    def test_smooth_trajectory_roundtrip(self):
        t = 0.05 * np.arange(201)
        p = np.stack(
            [
                1.5 * np.sin(0.4 * t),
                1.2 * t + 0.3 * np.cos(0.5 * t),
                0.4 * np.sin(0.2 * t + 1.0),
            ],
            axis=1,
        )
        traj = TrajectorySeries(times=t, positions=p)
        back = spherical_to_cartesian(
            cartesian_to_spherical(traj), start=p[0], dt=traj.dt
        )
        assert np.max(np.linalg.norm(back.positions - p, axis=1)) < 1e-6

    def test_roundtrip_other_direction(self):
        rng = np.random.default_rng(5)
        n = 50
        ch = SphericalChannels(
            v=rng.uniform(0.2, 2.0, n),
            theta=rng.uniform(0.3, np.pi - 0.3, n),
            phi=rng.uniform(-np.pi, np.pi, n),
        )
        traj = spherical_to_cartesian(ch, start=np.zeros(3), dt=0.05)
        ch2 = cartesian_to_spherical(traj)
        # Entry 0 is padding; the integrated entries must match.
        assert np.allclose(ch2.v[1:], ch.v[1:], atol=1e-9)
        assert np.allclose(ch2.theta[1:], ch.theta[1:], atol=1e-9)
        phase = np.angle(np.exp(1j * (ch2.phi[1:] - ch.phi[1:])))
        assert np.allclose(phase, 0.0, atol=1e-9)
