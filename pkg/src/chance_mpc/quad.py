"""Rigid-body quadcopter model with a pseudo-linear state-dependent form.

State x = (p, v, zeta, omega): world position, body-frame velocity,
yaw-pitch-roll Euler angles zeta = (roll, pitch, yaw), and body rates.
Rotor thrusts map through a fixed mixing matrix into collective thrust
and body torques; the sign convention makes gravity act along +z at
level attitude with T = -(sum of thrusts), so hover needs thrust
m*g/4 per rotor.

sdc_linearize factors the drift into A_tilde(x) @ x exactly (state-
dependent coefficients), with the level-attitude gravity constant
absorbed into the attitude block; the input matrix B_tilde then acts on
thrust deviations from hover, and A_tilde(x) @ x + B_tilde @ u equals
the full nonlinear derivative at thrusts u_eq + u for every state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

# Below this magnitude the angle-ratio entries switch to their limits.
_ANGLE_EPS = 1e-8
_PITCH_GUARD = 1e-6


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters and the derived hover input.

    Attributes:
        m: mass in kg.
        g: gravitational acceleration, m/s^2.
        J: 3-vector of principal inertias (Jx, Jy, Jz), kg m^2.
        arm: rotor arm length, m.
        drag: rotor drag-to-thrust coefficient (yaw torque per newton).
    """

    m: float = 0.8
    g: float = 9.81
    J: NDArray = field(default_factory=lambda: np.array([0.0244, 0.0244, 0.0436]))
    arm: float = 0.162
    drag: float = 2.17e-3

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        if self.m <= 0 or self.g <= 0 or self.arm <= 0 or self.drag <= 0:
            raise ValueError("physical parameters must be positive")
        if J.shape != (3,) or np.any(J <= 0):
            raise ValueError("inertia must be a positive 3-vector")
        object.__setattr__(self, "J", J)

    @property
    def u_eq(self) -> NDArray:
        """Hover thrusts (m*g/4 per rotor)."""
        return np.full(4, self.m * self.g / 4.0)

    @property
    def mixing(self) -> NDArray:
        """Rows map rotor thrusts to (T, tau_x, tau_y, tau_z)."""
        L, c = self.arm, self.drag
        return np.array(
            [
                [-1.0, -1.0, -1.0, -1.0],
                [0.0, -L, 0.0, L],
                [L, 0.0, -L, 0.0],
                [-c, c, -c, c],
            ]
        )


def pack_state(p, v, zeta, omega) -> NDArray:
    return np.concatenate([p, v, zeta, omega]).astype(float)


def unpack_state(x: NDArray):
    x = np.asarray(x, dtype=float)
    if x.shape != (12,):
        raise ValueError("state must be a 12-vector")
    return x[0:3], x[3:6], x[6:9], x[9:12]


def hover_state(position=(0.0, 0.0, 0.0)) -> NDArray:
    x = np.zeros(12)
    x[0:3] = position
    return x


def rotation_world_to_body(zeta: NDArray) -> NDArray:
    """Yaw-pitch-roll rotation taking world vectors into the body frame."""
    ph, th, ps = zeta
    cf, sf = np.cos(ph), np.sin(ph)
    ct, st = np.cos(th), np.sin(th)
    cs, ss = np.cos(ps), np.sin(ps)
    rx = np.array([[1, 0, 0], [0, cf, sf], [0, -sf, cf]])
    ry = np.array([[ct, 0, -st], [0, 1, 0], [st, 0, ct]])
    rz = np.array([[cs, ss, 0], [-ss, cs, 0], [0, 0, 1]])
    return rx @ ry @ rz


def euler_rate_matrix(zeta: NDArray) -> NDArray:
    """Maps body rates omega to Euler angle rates; singular at pitch +-pi/2."""
    ph, th, _ = zeta
    ct = np.cos(th)
    if abs(abs(th) - np.pi / 2.0) < _PITCH_GUARD:
        raise ValueError("pitch within 1e-6 of the +-pi/2 singularity")
    cf, sf = np.cos(ph), np.sin(ph)
    tt = np.tan(th)
    return np.array(
        [
            [1.0, sf * tt, cf * tt],
            [0.0, cf, -sf],
            [0.0, sf / ct, cf / ct],
        ]
    )


def mix_thrusts(params: QuadParams, thrusts: NDArray):
    """Collective thrust and body torques from the four rotor thrusts."""
    f = np.asarray(thrusts, dtype=float)
    if f.shape != (4,):
        raise ValueError("thrusts must be a 4-vector")
    out = params.mixing @ f
    return float(out[0]), out[1:4]


def dynamics_rhs(params: QuadParams, x: NDArray, thrusts: NDArray) -> NDArray:
    """Full nonlinear state derivative at total rotor thrusts."""
    p, v, zeta, omega = unpack_state(x)
    R = rotation_world_to_body(zeta)
    W = euler_rate_matrix(zeta)
    T, tau = mix_thrusts(params, thrusts)
    e = np.array([0.0, 0.0, 1.0])
    J = params.J
    dp = R.T @ v
    dv = -np.cross(omega, v) + params.g * (R @ e) + e * (T / params.m)
    dzeta = W @ omega
    domega = (-np.cross(omega, J * omega) + tau) / J
    return np.concatenate([dp, dv, dzeta, domega])


def _ratio(num_fn, ang: float, limit: float) -> float:
    """num_fn(ang)/ang with the analytic limit below the epsilon guard."""
    if abs(ang) < _ANGLE_EPS:
        return limit
    return num_fn(ang) / ang


def sdc_linearize(params: QuadParams, x: NDArray):
    """State-dependent factorization (A_tilde, B_tilde) at x.

    A_tilde(x) @ x + B_tilde @ u reproduces dynamics_rhs(x, u_eq + u)
    exactly for any thrust deviation u; in particular the hover state
    with u = 0 maps to the zero derivative.  Singular angle ratios in
    the attitude block take their analytic limits below 1e-8 rad.
    """
    p, v, zeta, omega = unpack_state(x)
    g = params.g
    ph, th, _ = zeta
    cf, sf = np.cos(ph), np.sin(ph)
    ct = np.cos(th)

    R = rotation_world_to_body(zeta)
    W = euler_rate_matrix(zeta)

    def half_skew(w):
        return 0.5 * np.array(
            [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
        )

    A = -half_skew(omega)  # A @ v = -(1/2) omega x v
    C = half_skew(v)  # C @ omega = +(1/2) v x omega

    b12 = -g * _ratio(np.sin, th, 1.0)
    b21 = g * ct * _ratio(np.sin, ph, 1.0)
    b31 = g * (ct + 1.0) * 0.5 * _ratio(lambda a: np.cos(a) - 1.0, ph, 0.0)
    b32 = g * (cf + 1.0) * 0.5 * _ratio(lambda a: np.cos(a) - 1.0, th, 0.0)
    B = np.array([[0.0, b12, 0.0], [b21, 0.0, 0.0], [b31, b32, 0.0]])

    Jx, Jy, Jz = params.J
    wx, wy, wz = omega
    D = np.array(
        [
            [0.0, (Jy - Jz) * wz / (2 * Jx), (Jy - Jz) * wy / (2 * Jx)],
            [(Jz - Jx) * wz / (2 * Jy), 0.0, (Jz - Jx) * wx / (2 * Jy)],
            [(Jx - Jy) * wy / (2 * Jz), (Jx - Jy) * wx / (2 * Jz), 0.0],
        ]
    )

    Z = np.zeros((3, 3))
    A_tilde = np.block(
        [
            [Z, R.T, Z, Z],
            [Z, A, B, C],
            [Z, Z, Z, W],
            [Z, Z, Z, D],
        ]
    )

    B_tilde = np.zeros((12, 4))
    M = params.mixing
    B_tilde[3:6, :] = np.outer(np.array([0.0, 0.0, 1.0]), M[0] / params.m)
    B_tilde[9:12, :] = M[1:4] / params.J[:, None]
    return A_tilde, B_tilde


def discrete_model(params: QuadParams, x: NDArray, dt: float):
    """One-step matrices (A_d, B_d) with A_d = A_tilde*dt + I, B_d = B_tilde*dt.

    The model advances x_{k+1} = A_d x_k + B_d u_k with u the thrust
    deviation from hover.
    """
    A_tilde, B_tilde = sdc_linearize(params, x)
    return np.eye(12) + dt * A_tilde, dt * B_tilde


def step(params: QuadParams, x: NDArray, thrusts: NDArray, dt: float) -> NDArray:
    """Integrate the full nonlinear model one step with classic RK4."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = dynamics_rhs(params, x, thrusts)
    k2 = dynamics_rhs(params, x + 0.5 * dt * k1, thrusts)
    k3 = dynamics_rhs(params, x + 0.5 * dt * k2, thrusts)
    k4 = dynamics_rhs(params, x + dt * k3, thrusts)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
