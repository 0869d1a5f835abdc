"""Receding-horizon collision-avoiding flight controller.

Each control step solves a finite-horizon tracking problem for the
linearized rigid-body model while keeping planned positions outside
obstacle regions.  Moving obstacles enter as tail-bounded halfspaces
built from predicted position ellipsoids, static ones as supporting
halfspaces of safety balls; both are re-anchored at the current iterate
and the resulting dense QPs are re-solved until the iterate settles.
An infeasible problem escalates through slack relaxation levels before
a hold-last-input fallback, so every step returns an applicable input.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from time import perf_counter

import numpy as np
from numpy.typing import NDArray
from scipy.special import erfinv

from .geometry import (
    ConfidenceEllipsoid,
    InsideCollisionRegionError,
    PredictedRegionSequence,
    ellipsoid_from_gaussian,
    halfspace_from_ellipsoid,
    inflate_covariance,
)
from .qp import QpInfeasibleError, solve_qp

_STEP_TOL = 1e-8
_FEAS_TOL = 1e-6
_SLACK_TOL = 1e-9
_MAX_SQP_ITER = 50

_STATUSES = ("optimal", "relaxed1", "relaxed2", "fallback")

# State layout indices for the 12-state rigid-body model.
_VEL = (3, 4, 5)
_ANG = (6, 7, 8)


class StabilityDemotedWarning(RuntimeWarning):
    """Terminal-decrease bound is nonpositive; the row was softened."""


def _symmetric_psd(mat: NDArray, name: str) -> NDArray:
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.max(np.abs(m - m.T)) > 1e-9 * max(1.0, float(np.max(np.abs(m)))):
        raise ValueError(f"{name} must be symmetric")
    m = 0.5 * (m + m.T)
    lam = np.linalg.eigvalsh(m)
    if float(lam[0]) < -1e-9 * max(1.0, float(lam[-1])):
        raise ValueError(f"{name} must be positive semidefinite")
    return m


def _symmetric_pd(mat: NDArray, name: str) -> NDArray:
    m = _symmetric_psd(mat, name)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be positive definite") from exc
    return m


def _bounds_pair(pair, name: str) -> tuple[float, float]:
    lo, hi = float(pair[0]), float(pair[1])
    if not lo < hi:
        raise ValueError(f"{name} lower bound must be below the upper bound")
    return lo, hi


@dataclass(frozen=True)
class MpcConfig:
    """Weights, bounds, and solver limits for the per-step problem.

    Defaults give the stock quadcopter setup: identity weights over the
    12-state layout, thrust deviations in [-2, 2] N with per-step
    changes in [-1.96, 1.96] N, velocities in [-5, 5] m/s, roll/yaw in
    [-pi, pi] and pitch in [-pi/2, pi/2].
    """

    n_horizon: int = 25
    q_weight: NDArray | None = None
    r_weight: NDArray | None = None
    p_weight: NDArray | None = None
    phi: float = 0.05
    d_safe: float = 2.0
    v_bounds: tuple[float, float] = (-5.0, 5.0)
    u_bounds: tuple[float, float] = (-2.0, 2.0)
    du_bounds: tuple[float, float] | None = (-1.96, 1.96)
    angle_bounds: tuple[tuple[float, float], ...] = (
        (-math.pi, math.pi),
        (-0.5 * math.pi, 0.5 * math.pi),
        (-math.pi, math.pi),
    )
    t_max: float = 0.2
    n_set: int = 2
    rho: float = 1e3
    e_margin: float = 1e-4
    confidence: float = 0.95
    # moving-obstacle halfspaces use the bare confidence ellipsoid;
    # this grows each semi-axis by d_safe first (off by default)
    inflate_moving_regions: bool = False

    def __post_init__(self) -> None:
        if int(self.n_horizon) != self.n_horizon or self.n_horizon < 2:
            raise ValueError("horizon must be an integer >= 2")
        object.__setattr__(self, "n_horizon", int(self.n_horizon))
        q = np.eye(12) if self.q_weight is None else self.q_weight
        r = np.eye(4) if self.r_weight is None else self.r_weight
        p = np.eye(12) if self.p_weight is None else self.p_weight
        q = _symmetric_psd(q, "state weight")
        r = _symmetric_pd(r, "input weight")
        p = _symmetric_pd(p, "terminal weight")
        if p.shape != q.shape:
            raise ValueError("terminal weight must match the state weight size")
        object.__setattr__(self, "q_weight", q)
        object.__setattr__(self, "r_weight", r)
        object.__setattr__(self, "p_weight", p)
        if not 0.0 < self.phi < 0.5:
            raise ValueError("violation probability must lie in (0, 0.5)")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.d_safe <= 0.0:
            raise ValueError("safety distance must be positive")
        object.__setattr__(self, "v_bounds", _bounds_pair(self.v_bounds, "velocity"))
        object.__setattr__(self, "u_bounds", _bounds_pair(self.u_bounds, "input"))
        if self.du_bounds is not None:
            object.__setattr__(
                self, "du_bounds", _bounds_pair(self.du_bounds, "input difference")
            )
        ang = tuple(_bounds_pair(p_, "angle") for p_ in self.angle_bounds)
        if len(ang) != 3:
            raise ValueError("angle bounds must give (roll, pitch, yaw) pairs")
        object.__setattr__(self, "angle_bounds", ang)
        if self.t_max < 0.0:
            raise ValueError("computation time limit must be nonnegative")
        if int(self.n_set) != self.n_set or self.n_set < 0:
            raise ValueError("relaxation repeat count must be a nonnegative integer")
        object.__setattr__(self, "n_set", int(self.n_set))
        if self.rho <= 0.0:
            raise ValueError("slack penalty must be positive")
        if self.e_margin <= 0.0:
            raise ValueError("decrease margin must be positive")


@dataclass(frozen=True)
class NmpcSolution:
    """Planned input sequence with the predicted states and diagnostics.

    `controls` always respects the input box regardless of status.
    `value_function` is the tracking cost of the returned plan without
    any slack penalties; `stage_cost_first` is its first stage term,
    kept for the next step's terminal-decrease bound.
    """

    controls: NDArray
    states: NDArray
    cost: float
    status: str
    slacks: float
    solve_time: float
    value_function: float
    stage_cost_first: float
    stability_hard: bool = False
    stability_active: bool = False
    sqp_iterations: int = 0
    slack_by_kind: dict[str, float] | None = None

    def __post_init__(self) -> None:
        controls = np.asarray(self.controls, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if controls.ndim != 2 or states.ndim != 2:
            raise ValueError("controls and states must be 2-D arrays")
        if states.shape[0] != controls.shape[0] + 1:
            raise ValueError("states must hold one more step than controls")
        if self.status not in _STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "states", states)


@dataclass(frozen=True)
class NmpcProblem:
    """One control step: where we are, where to go, what to avoid."""

    initial_state: NDArray
    reference: NDArray
    linear_model: tuple[NDArray, NDArray]
    static_obstacles: tuple[NDArray, ...] = ()
    moving_regions: tuple[PredictedRegionSequence, ...] = ()
    prev_solution: NmpcSolution | None = None

    def __post_init__(self) -> None:
        x0 = np.asarray(self.initial_state, dtype=float)
        ref = np.asarray(self.reference, dtype=float)
        a_d = np.asarray(self.linear_model[0], dtype=float)
        b_d = np.asarray(self.linear_model[1], dtype=float)
        if x0.ndim != 1:
            raise ValueError("initial state must be a vector")
        n = x0.shape[0]
        if ref.ndim != 2 or ref.shape[1] != n:
            raise ValueError("reference must be a sequence of state vectors")
        if a_d.shape != (n, n):
            raise ValueError("state matrix must be square and match the state size")
        if b_d.ndim != 2 or b_d.shape[0] != n:
            raise ValueError("input matrix rows must match the state size")
        if not (
            np.all(np.isfinite(x0))
            and np.all(np.isfinite(ref))
            and np.all(np.isfinite(a_d))
            and np.all(np.isfinite(b_d))
        ):
            raise ValueError("problem data must be finite")
        statics = tuple(np.asarray(c, dtype=float) for c in self.static_obstacles)
        for c in statics:
            if c.shape != (3,) or not np.all(np.isfinite(c)):
                raise ValueError("static obstacles must be finite 3-vectors")
        object.__setattr__(self, "initial_state", x0)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "linear_model", (a_d, b_d))
        object.__setattr__(self, "static_obstacles", statics)
        object.__setattr__(self, "moving_regions", tuple(self.moving_regions))


@dataclass(frozen=True)
class StabilityData:
    """Constant pieces of the terminal-decrease inequality.

    The decision-dependent left side is the last stage cost plus the
    cross-plan coupling; `bound` already absorbs the fixed first
    coupling term, so it can be nonpositive even though the formula's
    nominal bound is positive, in which case the row is softened.
    """

    hard: bool
    bound: float
    prev_cost: float
    coupling_const: float


def stability_constraint(problem: NmpcProblem, config: MpcConfig) -> StabilityData | None:
    """Terminal-decrease bound from the previous step, if one exists.

    The decrease recursion presumes the previous plan satisfied the
    original constraints, so a relaxed or fallback previous step resets
    the bound the same way a missing one does.
    """
    prev = problem.prev_solution
    if prev is None or prev.status != "optimal":
        return None
    n = config.n_horizon
    n_x = problem.initial_state.shape[0]
    if prev.states.shape != (n + 1, n_x):
        return None
    q = config.q_weight
    coupling = problem.initial_state - prev.states[1]
    coupling_const = float(coupling @ q @ coupling)
    bound = prev.stage_cost_first - config.e_margin - coupling_const
    hard = bound > 0.0
    if not hard:
        warnings.warn(
            "terminal-decrease bound is nonpositive; enforcing it softly",
            StabilityDemotedWarning,
            stacklevel=2,
        )
    return StabilityData(
        hard=hard,
        bound=bound,
        prev_cost=prev.stage_cost_first,
        coupling_const=coupling_const,
    )


def static_obstacle_halfspace(
    center: NDArray,
    at_point: NDArray,
    d_safe: float,
    fallback_dir: NDArray | None = None,
) -> tuple[NDArray, float]:
    """Supporting halfspace n^T p >= rhs of the safety ball at `center`.

    The normal points from the center toward `at_point`; any point in
    the halfspace is at least d_safe from the center, so the row is a
    conservative stand-in for the ball-exclusion constraint.
    """
    center = np.asarray(center, dtype=float)
    gap = np.asarray(at_point, dtype=float) - center
    nrm = float(np.linalg.norm(gap))
    if nrm < 1e-9:
        if fallback_dir is not None and float(np.linalg.norm(fallback_dir)) > 1e-9:
            gap = np.asarray(fallback_dir, dtype=float)
        else:
            gap = np.array([0.0, 0.0, 1.0])
        nrm = float(np.linalg.norm(gap))
    normal = gap / nrm
    return normal, float(d_safe + normal @ center)


@dataclass(frozen=True)
class _Condensed:
    """Stacked prediction operators x_k = phi_k + G_u U (+ G_d D)."""

    n_x: int
    n_u_dim: int
    n_hor: int
    phi: NDArray
    g_u: NDArray
    g_d: NDArray | None

    def states_of(self, z: NDArray, n_u: int, n_d: int) -> NDArray:
        x = self.phi + self.g_u @ z[:n_u]
        if self.g_d is not None and n_d:
            x = x + self.g_d @ z[n_u : n_u + n_d]
        return x.reshape(self.n_hor, self.n_x)


def _condense(problem: NmpcProblem, config: MpcConfig, with_defects: bool) -> _Condensed:
    a_d, b_d = problem.linear_model
    n_x = a_d.shape[0]
    m = b_d.shape[1]
    n = config.n_horizon
    powers = [np.eye(n_x)]
    for _ in range(n):
        powers.append(a_d @ powers[-1])
    phi = np.concatenate([powers[k] @ problem.initial_state for k in range(1, n + 1)])
    g_u = np.zeros((n_x * n, m * n))
    for k in range(1, n + 1):
        for j in range(k):
            g_u[(k - 1) * n_x : k * n_x, j * m : (j + 1) * m] = powers[k - 1 - j] @ b_d
    g_d = None
    if with_defects:
        g_d = np.zeros((n_x * n, n_x * n))
        for k in range(1, n + 1):
            for j in range(k):
                g_d[(k - 1) * n_x : k * n_x, j * n_x : (j + 1) * n_x] = powers[k - 1 - j]
    return _Condensed(n_x=n_x, n_u_dim=m, n_hor=n, phi=phi, g_u=g_u, g_d=g_d)


@dataclass(frozen=True)
class _Layout:
    """Decision vector layout [inputs | defects | slacks] with slot labels."""

    n_u: int
    n_d: int
    slots: tuple[tuple[str, int, int], ...]
    stability: StabilityData | None

    @property
    def n_s(self) -> int:
        return len(self.slots)

    @property
    def n_vars(self) -> int:
        return self.n_u + self.n_d + self.n_s

    def slack_values(self, z: NDArray) -> NDArray:
        return z[self.n_u + self.n_d :]


def _build_layout(
    problem: NmpcProblem, config: MpcConfig, relax_level: int, model: _Condensed
) -> _Layout:
    if relax_level not in (0, 1, 2):
        raise ValueError("relaxation level must be 0, 1, or 2")
    n = config.n_horizon
    slots: list[tuple[str, int, int]] = []
    if relax_level >= 1:
        if model.n_x == 12:
            for kind in ("v_lo", "v_hi"):
                slots.extend((kind, k, i) for k in range(1, n + 1) for i in range(3))
            for kind in ("ang_lo", "ang_hi"):
                slots.extend((kind, k, i) for k in range(1, n + 1) for i in range(3))
        for j in range(len(problem.static_obstacles)):
            slots.extend(("static", k, j) for k in range(1, n + 1))
        for i in range(len(problem.moving_regions)):
            slots.extend(("moving", k, i) for k in range(1, n + 1))
    stab = stability_constraint(problem, config)
    if stab is not None and not stab.hard:
        slots.append(("stability", 0, 0))
    return _Layout(
        n_u=model.n_u_dim * n,
        n_d=model.n_x * n if relax_level == 2 else 0,
        slots=tuple(slots),
        stability=stab,
    )


@dataclass(frozen=True)
class CostModel:
    """Quadratic objective J(z) = z^T h z / 2 + g^T z + constant."""

    h: NDArray
    g: NDArray
    constant: float
    layout: _Layout

    def value(self, z: NDArray) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.h @ z + self.g @ z + self.constant)

    def gradient(self, z: NDArray) -> NDArray:
        return self.h @ np.asarray(z, dtype=float) + self.g


def _apply_qbar(config: MpcConfig, stacked: NDArray) -> NDArray:
    """Multiply a stacked (n_hor*n_x, ...) array by diag(Q,...,Q,P)."""
    n = config.n_horizon
    n_x = config.q_weight.shape[0]
    out = np.empty_like(stacked)
    for k in range(1, n + 1):
        w = config.q_weight if k < n else config.p_weight
        out[(k - 1) * n_x : k * n_x] = w @ stacked[(k - 1) * n_x : k * n_x]
    return out


def _build_cost(
    problem: NmpcProblem, config: MpcConfig, model: _Condensed, layout: _Layout
) -> CostModel:
    n = config.n_horizon
    m = model.n_u_dim
    resid0 = model.phi - problem.reference[1:].reshape(-1)
    mats = [model.g_u] if layout.n_d == 0 else [model.g_u, model.g_d]
    m_mat = mats[0] if len(mats) == 1 else np.hstack(mats)
    qm = _apply_qbar(config, m_mat)
    core = 2.0 * (m_mat.T @ qm)
    for k in range(n):
        sl = slice(k * m, (k + 1) * m)
        core[sl, sl] += 2.0 * config.r_weight
    if layout.n_d:
        idx = np.arange(layout.n_u, layout.n_u + layout.n_d)
        core[idx, idx] += 2.0 * config.rho
    h = np.zeros((layout.n_vars, layout.n_vars))
    h[: core.shape[0], : core.shape[1]] = core
    if layout.n_s:
        idx = np.arange(layout.n_u + layout.n_d, layout.n_vars)
        h[idx, idx] = 2.0 * config.rho
    g = np.zeros(layout.n_vars)
    g[: m_mat.shape[1]] = 2.0 * (qm.T @ resid0)
    dev0 = problem.initial_state - problem.reference[0]
    constant = float(resid0 @ _apply_qbar(config, resid0)) + float(
        dev0 @ config.q_weight @ dev0
    )
    return CostModel(h=h, g=g, constant=constant, layout=layout)


def build_cost(
    problem: NmpcProblem, config: MpcConfig, relax_level: int = 0
) -> CostModel:
    """Assemble the tracking-plus-penalty objective for one step."""
    _validate(problem, config)
    model = _condense(problem, config, with_defects=relax_level == 2)
    layout = _build_layout(problem, config, relax_level, model)
    return _build_cost(problem, config, model, layout)


@dataclass(frozen=True)
class ConstraintSet:
    """Linear rows c_mat z >= b_vec with per-row provenance labels.

    `meta` rows are (kind, step, index, slack_slot, linearized) where
    slack_slot is -1 for hard rows and `linearized` marks rows whose
    underlying constraint is nonlinear in the decision variables.
    """

    c_mat: NDArray
    b_vec: NDArray
    meta: tuple[tuple[str, int, int, int, bool], ...]
    anchored: bool

    def kinds(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for kind, *_ in self.meta:
            out[kind] = out.get(kind, 0) + 1
        return out


def _stability_lhs_grad(
    problem: NmpcProblem,
    config: MpcConfig,
    model: _Condensed,
    layout: _Layout,
    states_iter: NDArray,
    controls_iter: NDArray,
) -> tuple[float, NDArray, float]:
    """Decrease left side at the iterate: value, gradient, grad.z anchor.

    The anchor inner product grad @ z_iter is recovered from the iterate
    states themselves (x_k - phi_k spans the input and defect columns),
    so callers never need the raw defect part of the iterate.
    """
    prev = problem.prev_solution
    n = config.n_horizon
    q = config.q_weight
    n_x = model.n_x
    m = model.n_u_dim
    grad = np.zeros(layout.n_vars)
    terms: list[tuple[int, NDArray, NDArray]] = [
        (n - 1, q, problem.reference[n - 1])
    ]
    for i in range(1, n - 1):
        terms.append((i, q, prev.states[i + 1]))
    value = 0.0
    anchor_dot = 0.0
    for k, w, center in terms:
        dev = states_iter[k - 1] - center
        value += float(dev @ w @ dev)
        wv = 2.0 * (w @ dev)
        block = slice((k - 1) * n_x, k * n_x)
        grad[: layout.n_u] += model.g_u[block].T @ wv
        if layout.n_d:
            grad[layout.n_u : layout.n_u + layout.n_d] += model.g_d[block].T @ wv
        anchor_dot += float(wv @ (states_iter[k - 1] - model.phi[block]))
    u_last = controls_iter[n - 1]
    value += float(u_last @ config.r_weight @ u_last)
    ru = 2.0 * (config.r_weight @ u_last)
    grad[(n - 1) * m : n * m] += ru
    anchor_dot += float(ru @ u_last)
    return value, grad, anchor_dot


def _stability_quadratic(
    problem: NmpcProblem,
    config: MpcConfig,
    model: _Condensed,
    layout: _Layout,
) -> tuple[NDArray, NDArray, float]:
    """Exact quadratic form of the decrease left side over the decision vector.

    Predicted states are affine in the inputs and defects, so the left
    side is exactly q(z) = z^T h z / 2 + g^T z + c; slack columns never
    enter.  Same terms as _stability_lhs_grad, without an anchor point.
    """
    prev = problem.prev_solution
    n = config.n_horizon
    q = config.q_weight
    n_x = model.n_x
    m = model.n_u_dim
    n_zd = layout.n_u + layout.n_d
    h_core = np.zeros((n_zd, n_zd))
    g_core = np.zeros(n_zd)
    const = 0.0
    terms: list[tuple[int, NDArray, NDArray]] = [
        (n - 1, q, problem.reference[n - 1])
    ]
    for i in range(1, n - 1):
        terms.append((i, q, prev.states[i + 1]))
    for k, w, center in terms:
        block = slice((k - 1) * n_x, k * n_x)
        if layout.n_d:
            gam = np.hstack([model.g_u[block], model.g_d[block]])
        else:
            gam = model.g_u[block]
        off = model.phi[block] - center
        wg = w @ gam
        h_core += 2.0 * gam.T @ wg
        g_core += 2.0 * wg.T @ off
        const += float(off @ w @ off)
    sl = slice((n - 1) * m, n * m)
    h_core[sl, sl] += 2.0 * config.r_weight
    h_q = np.zeros((layout.n_vars, layout.n_vars))
    h_q[:n_zd, :n_zd] = h_core
    g_q = np.zeros(layout.n_vars)
    g_q[:n_zd] = g_core
    return h_q, g_q, const


def _solve_decrease_qcqp(
    cost: CostModel,
    c_in: NDArray,
    b_in: NDArray,
    h_q: NDArray,
    g_q: NDArray,
    q0: float,
    bound: float,
    rho: float | None = None,
    lam_init: float = 0.0,
) -> tuple[NDArray, float, float]:
    """QP coupled to one convex quadratic decrease bound, exactly.

    A single linearized cut of the convex left side can oscillate (each
    QP lands where the quadratic excess reopens the gap), so the bound
    is handled through its scalar multiplier instead: psi(lam) =
    q(z(lam)) - bound is nonincreasing in lam.  With rho None the bound
    is hard and the search finds psi(lam) = 0; otherwise the bound is a
    penalty rho * max(psi, 0)^2 whose optimum satisfies the fixed point
    lam = 2 rho max(psi(lam), 0), a strictly increasing scalar root
    problem.  Returns (iterate, residual slack max(psi, 0), multiplier);
    the slack is zero for the hard case.  lam_init seeds the bracket so
    outer re-linearization passes reuse the last multiplier.  An
    inactive bound costs nothing beyond the plain QP at lam = 0.
    """

    def at(lam: float) -> tuple[NDArray, float]:
        res = solve_qp(cost.h + lam * h_q, cost.g + lam * g_q, c_in=c_in, b_in=b_in)
        z = res.x
        return z, float(0.5 * z @ h_q @ z + g_q @ z + q0 - bound)

    tol = 1e-6 * (1.0 + abs(bound))
    if rho is not None:
        z0, psi0 = at(0.0)
        if psi0 <= 0.0:
            return z0, 0.0, 0.0
        z, s = _soft_decrease_root(at, psi0, z0, rho, lam_init)
        return z, s, 2.0 * rho * s
    # hard bound: probe the carried-over multiplier first so a steadily
    # active constraint costs one QP per outer pass
    lam_lo = 0.0
    psi_lo = np.inf
    lam_hi = -1.0
    z_hi = None
    psi_hi = np.inf
    if lam_init > 0.0:
        z_i, psi_i = at(lam_init)
        if -10.0 * tol <= psi_i <= 0.0:
            return z_i, 0.0, lam_init
        if psi_i <= 0.0:
            z0, psi0 = at(0.0)
            if psi0 <= tol:
                return z0, 0.0, 0.0
            psi_lo = psi0
            lam_hi, z_hi, psi_hi = lam_init, z_i, psi_i
        else:
            lam_lo, psi_lo = lam_init, psi_i
    else:
        z0, psi0 = at(0.0)
        if psi0 <= tol:
            return z0, 0.0, 0.0
        psi_lo = psi0
    if lam_hi < 0.0:
        # minimum of q over the linear rows decides reachability of the
        # bound; a small multiple of the objective curvature keeps the
        # probe QP well conditioned without moving its value much
        mu = 1e-7
        res_probe = solve_qp(
            h_q + mu * cost.h, g_q + mu * cost.g, c_in=c_in, b_in=b_in
        )
        probe = res_probe.x
        psi_probe = float(0.5 * probe @ h_q @ probe + g_q @ probe + q0 - bound)
        slop = tol + 10.0 * mu * (1.0 + abs(cost.value(probe)))
        if psi_probe > slop:
            raise QpInfeasibleError("stability decrease bound unreachable")
        lam_hi = 10.0 * lam_lo if lam_lo > 0.0 else 1.0
        for _ in range(11):
            z_hi, psi_hi = at(lam_hi)
            if psi_hi <= 0.0:
                break
            lam_lo, psi_lo = lam_hi, psi_hi
            lam_hi *= 10.0
        else:
            # bound reachable but only in the q-minimizing limit
            return probe, 0.0, lam_hi
    side = 0
    for _ in range(40):
        if psi_lo <= tol or lam_hi - lam_lo <= 1e-9 * lam_hi:
            break
        gap = psi_lo - psi_hi
        if gap > 0.0:
            lam_mid = lam_lo + (lam_hi - lam_lo) * psi_lo / gap
        else:
            lam_mid = 0.5 * (lam_lo + lam_hi)
        if not lam_lo < lam_mid < lam_hi:
            lam_mid = 0.5 * (lam_lo + lam_hi)
        z_mid, psi_mid = at(lam_mid)
        if psi_mid <= 0.0:
            lam_hi, psi_hi, z_hi = lam_mid, psi_mid, z_mid
            if side == -1:
                psi_lo *= 0.5
            side = -1
        else:
            lam_lo, psi_lo = lam_mid, psi_mid
            if side == 1:
                psi_hi *= 0.5
            side = 1
    return z_hi, 0.0, lam_hi


def _soft_decrease_root(
    at, psi0: float, z0: NDArray, rho: float, lam_init: float = 0.0
) -> tuple[NDArray, float]:
    """Root of g(lam) = lam - 2 rho max(psi(lam), 0), which is increasing.

    g(0) < 0 and g(2 rho psi(0)) >= 0 bracket the root; psi flat in lam
    (the common near-steady case) makes the upper endpoint the root
    itself, so the search usually ends after one extra QP.  A positive
    lam_init inside the bracket is probed first.
    """
    lam_lo, g_lo = 0.0, -2.0 * rho * psi0
    lam_hi = 2.0 * rho * psi0
    have_hi = False
    if 0.0 < lam_init < lam_hi:
        z_cur, psi_cur = at(lam_init)
        g_init = lam_init - 2.0 * rho * max(psi_cur, 0.0)
        if abs(g_init) <= 1e-6 * (1.0 + lam_init):
            return z_cur, max(psi_cur, 0.0)
        if g_init < 0.0:
            lam_lo, g_lo = lam_init, g_init
        else:
            lam_hi, g_hi = lam_init, g_init
            have_hi = True
    if not have_hi:
        z_cur, psi_cur = at(lam_hi)
        g_hi = lam_hi - 2.0 * rho * max(psi_cur, 0.0)
        if abs(g_hi) <= 1e-6 * (1.0 + lam_hi):
            return z_cur, max(psi_cur, 0.0)
    side = 0
    for _ in range(40):
        if lam_hi - lam_lo <= 1e-9 * (1.0 + lam_hi):
            break
        gap = g_hi - g_lo
        if gap > 0.0:
            lam_mid = lam_lo - g_lo * (lam_hi - lam_lo) / gap
        else:
            lam_mid = 0.5 * (lam_lo + lam_hi)
        if not lam_lo < lam_mid < lam_hi:
            lam_mid = 0.5 * (lam_lo + lam_hi)
        z_cur, psi_cur = at(lam_mid)
        g_mid = lam_mid - 2.0 * rho * max(psi_cur, 0.0)
        if abs(g_mid) <= 1e-6 * (1.0 + lam_mid):
            break
        if g_mid < 0.0:
            lam_lo, g_lo = lam_mid, g_mid
            if side == -1:
                g_hi *= 0.5
            side = -1
        else:
            lam_hi, g_hi = lam_mid, g_mid
            if side == 1:
                g_lo *= 0.5
            side = 1
    return z_cur, max(psi_cur, 0.0)


def _region_geometry(
    problem: NmpcProblem, config: MpcConfig
) -> tuple[tuple[tuple[ConfidenceEllipsoid, NDArray], ...], ...]:
    """Keep-out ellipsoid and tail covariance per region and stage.

    Both depend only on the prediction and the configuration, never on
    the iterate, so one table serves every linearization pass and
    violation check of a solve.
    """
    grow = config.d_safe if config.inflate_moving_regions else 0.0
    table = []
    for region in problem.moving_regions:
        per_stage = []
        for k in range(config.n_horizon):
            cov = np.asarray(region.covs[k], dtype=float)
            region_cov = (
                inflate_covariance(cov, grow, config.confidence)
                if grow > 0.0
                else cov
            )
            ell = ellipsoid_from_gaussian(
                region.means[k], region_cov, config.confidence
            )
            per_stage.append((ell, 0.5 * (cov + cov.T)))
        table.append(tuple(per_stage))
    return tuple(table)


def _inside_row(
    ell: ConfidenceEllipsoid,
    tail_cov: NDArray,
    at_point: NDArray,
    ref_point: NDArray,
    phi: float,
) -> tuple[NDArray, NDArray, float]:
    """Pre-violated halfspace for a step already inside the region.

    Points the normal from the region center toward the iterate (or the
    reference when they coincide) and anchors it on the boundary, so a
    slacked solve is pushed out along a deterministic direction.
    """
    gap = at_point - ell.center
    if float(np.linalg.norm(gap)) < 1e-9:
        gap = ref_point - ell.center
    if float(np.linalg.norm(gap)) < 1e-9:
        gap = np.array([0.0, 0.0, 1.0])
    normal = gap / float(np.linalg.norm(gap))
    prec_dir = float(normal @ np.linalg.solve(ell.cov, normal))
    t_bound = ell.scale / math.sqrt(max(prec_dir, 1e-300))
    anchor = ell.center + t_bound * normal
    margin = math.sqrt(max(2.0 * float(normal @ tail_cov @ normal), 0.0)) * float(
        erfinv(1.0 - 2.0 * phi)
    )
    return normal, anchor, margin


def build_constraints(
    problem: NmpcProblem,
    config: MpcConfig,
    relax_level: int,
    states_iter: NDArray | None = None,
    controls_iter: NDArray | None = None,
    model: _Condensed | None = None,
    layout: _Layout | None = None,
    region_geo: tuple | None = None,
) -> ConstraintSet:
    """Linear rows for one QP at the given iterate and relaxation level.

    Input box and input-difference rows are always hard; velocity,
    angle, and obstacle rows gain a dedicated slack column at level 1+.
    Level 2 additionally opens per-step dynamics defect variables whose
    magnitude is penalized in the cost.  A moving-region step whose
    iterate position is inside the region enters as a pre-violated
    push-out row; only the QP itself can then declare infeasibility.
    `region_geo` lets a caller reuse the _region_geometry table across
    linearization passes.
    """
    _validate(problem, config)
    if model is None:
        model = _condense(problem, config, with_defects=relax_level == 2)
    if layout is None:
        layout = _build_layout(problem, config, relax_level, model)
    if region_geo is None:
        region_geo = _region_geometry(problem, config)
    n = config.n_horizon
    n_x = model.n_x
    m = model.n_u_dim
    if controls_iter is None:
        controls_iter = np.zeros((n, m))
    if states_iter is None:
        states_iter = model.states_of(
            np.concatenate([controls_iter.reshape(-1), np.zeros(layout.n_vars - layout.n_u)]),
            layout.n_u,
            layout.n_d,
        )
    slot_col = {
        slot: layout.n_u + layout.n_d + i for i, slot in enumerate(layout.slots)
    }
    rows: list[NDArray] = []
    rhs: list[float] = []
    meta: list[tuple[str, int, int, int, bool]] = []

    def add_row(
        vec: NDArray,
        b: float,
        kind: str,
        step: int,
        index: int,
        slack_key: tuple[str, int, int] | None = None,
        linearized: bool = False,
    ) -> None:
        slot = -1
        if slack_key is not None and slack_key in slot_col:
            slot = slot_col[slack_key]
            vec = vec.copy()
            vec[slot] = 1.0
        rows.append(vec)
        rhs.append(b)
        meta.append((kind, step, index, slot, linearized))

    def state_row(k: int, w: NDArray) -> tuple[NDArray, float]:
        vec = np.zeros(layout.n_vars)
        block = slice((k - 1) * n_x, k * n_x)
        vec[: layout.n_u] = w @ model.g_u[block]
        if layout.n_d:
            vec[layout.n_u : layout.n_u + layout.n_d] = w @ model.g_d[block]
        return vec, float(w @ model.phi[block])

    u_lo, u_hi = config.u_bounds
    for k in range(n):
        for j in range(m):
            vec = np.zeros(layout.n_vars)
            vec[k * m + j] = 1.0
            add_row(vec, u_lo, "u_lo", k, j)
            add_row(-vec, -u_hi, "u_hi", k, j)
    if config.du_bounds is not None:
        d_lo, d_hi = config.du_bounds
        prev = problem.prev_solution
        if prev is not None and prev.controls.shape == (n, m):
            u_prev = prev.controls[0]
            for j in range(m):
                vec = np.zeros(layout.n_vars)
                vec[j] = 1.0
                add_row(vec, d_lo + u_prev[j], "du_lo", 0, j)
                add_row(-vec, -(d_hi + u_prev[j]), "du_hi", 0, j)
        for k in range(1, n):
            for j in range(m):
                vec = np.zeros(layout.n_vars)
                vec[k * m + j] = 1.0
                vec[(k - 1) * m + j] = -1.0
                add_row(vec, d_lo, "du_lo", k, j)
                add_row(-vec, -d_hi, "du_hi", k, j)
    if n_x == 12:
        v_lo, v_hi = config.v_bounds
        for k in range(1, n + 1):
            for i, comp in enumerate(_VEL):
                w = np.zeros(n_x)
                w[comp] = 1.0
                vec, off = state_row(k, w)
                add_row(vec, v_lo - off, "v_lo", k, i, ("v_lo", k, i))
                add_row(-vec, off - v_hi, "v_hi", k, i, ("v_hi", k, i))
        for k in range(1, n + 1):
            for i, comp in enumerate(_ANG):
                a_lo, a_hi = config.angle_bounds[i]
                w = np.zeros(n_x)
                w[comp] = 1.0
                vec, off = state_row(k, w)
                add_row(vec, a_lo - off, "ang_lo", k, i, ("ang_lo", k, i))
                add_row(-vec, off - a_hi, "ang_hi", k, i, ("ang_hi", k, i))
    if problem.static_obstacles or problem.moving_regions:
        if n_x < 3:
            raise ValueError("obstacle constraints need position states")
    for j, center in enumerate(problem.static_obstacles):
        for k in range(1, n + 1):
            p_bar = states_iter[k - 1, :3]
            ref_dir = problem.reference[k, :3] - center
            normal, row_rhs = static_obstacle_halfspace(
                center, p_bar, config.d_safe, fallback_dir=ref_dir
            )
            w = np.zeros(n_x)
            w[:3] = normal
            vec, off = state_row(k, w)
            add_row(
                vec, row_rhs - off, "static", k, j, ("static", k, j), linearized=True
            )
    for i in range(len(problem.moving_regions)):
        for k in range(1, n + 1):
            p_bar = states_iter[k - 1, :3]
            ell, tail_cov = region_geo[i][k - 1]
            try:
                hs = halfspace_from_ellipsoid(p_bar, ell, tail_cov, config.phi)
                normal, anchor, margin = hs.normal, hs.anchor, hs.margin
            except InsideCollisionRegionError:
                # iterate stage inside the keep-out: impose the push-out row
                # anyway; if the dynamics cannot honor it the QP reports
                # infeasible and the ladder escalates
                normal, anchor, margin = _inside_row(
                    ell, tail_cov, p_bar, problem.reference[k, :3], config.phi
                )
            w = np.zeros(n_x)
            w[:3] = normal
            vec, off = state_row(k, w)
            add_row(
                vec,
                margin + float(normal @ anchor) - off,
                "moving",
                k,
                i,
                ("moving", k, i),
                linearized=True,
            )
    for slot in layout.slots:
        vec = np.zeros(layout.n_vars)
        vec[slot_col[slot]] = 1.0
        add_row(vec, 0.0, "slack", slot[1], slot[2])
    stab = layout.stability
    if stab is not None:
        value, grad, anchor_dot = _stability_lhs_grad(
            problem, config, model, layout, states_iter, controls_iter
        )
        b = value - anchor_dot - stab.bound
        key = ("stability", 0, 0) if not stab.hard else None
        add_row(-grad, b, "stability", 0, 0, key, linearized=True)
    anchored = bool(
        problem.static_obstacles or problem.moving_regions or stab is not None
    )
    c_mat = np.vstack(rows) if rows else np.zeros((0, layout.n_vars))
    return ConstraintSet(
        c_mat=c_mat, b_vec=np.asarray(rhs, dtype=float), meta=tuple(meta), anchored=anchored
    )


def _validate(problem: NmpcProblem, config: MpcConfig) -> None:
    n = config.n_horizon
    a_d, b_d = problem.linear_model
    n_x = a_d.shape[0]
    if problem.reference.shape != (n + 1, n_x):
        raise ValueError("reference must hold horizon + 1 state vectors")
    if config.q_weight.shape != (n_x, n_x):
        raise ValueError("state weight size must match the model state size")
    if config.r_weight.shape != (b_d.shape[1], b_d.shape[1]):
        raise ValueError("input weight size must match the model input size")
    for region in problem.moving_regions:
        if region.means.shape[0] < n:
            raise ValueError("each predicted region must cover the horizon")


def _true_violation(
    z: NDArray,
    states: NDArray,
    controls: NDArray,
    cons: ConstraintSet,
    problem: NmpcProblem,
    config: MpcConfig,
    layout: _Layout,
    model: _Condensed,
) -> float:
    """Worst slack-adjusted violation of the underlying constraints."""
    resid = cons.b_vec - cons.c_mat @ z if cons.b_vec.size else np.zeros(0)
    worst = 0.0
    slacks = layout.slack_values(z)
    slot_value = {slot: float(slacks[i]) for i, slot in enumerate(layout.slots)}
    for row, (kind, k, idx, slot, linearized) in enumerate(cons.meta):
        if not linearized:
            worst = max(worst, float(resid[row]))
            continue
        s_val = slot_value.get((kind, k, idx), 0.0) if slot >= 0 else 0.0
        if kind == "stability":
            value, _, _ = _stability_lhs_grad(
                problem, config, model, layout, states, controls
            )
            worst = max(worst, value - layout.stability.bound - s_val)
            continue
        p_k = states[k - 1, :3]
        if kind == "static":
            d = float(np.linalg.norm(p_k - problem.static_obstacles[idx]))
            worst = max(worst, config.d_safe - d - s_val)
        elif kind == "moving":
            region = problem.moving_regions[idx]
            try:
                hs = chance_to_halfspace(
                    p_k,
                    region.means[k - 1],
                    region.covs[k - 1],
                    config.confidence,
                    config.phi,
                    grow=config.d_safe if config.inflate_moving_regions else 0.0,
                )
                worst = max(worst, hs.violation(p_k) - s_val)
            except InsideCollisionRegionError:
                worst = max(worst, float(resid[row]))
    return worst


def _tracking_values(
    problem: NmpcProblem, config: MpcConfig, states: NDArray, controls: NDArray
) -> tuple[float, float]:
    """Tracking cost of a plan and its first stage term (no penalties)."""
    n = config.n_horizon
    q, r, p_w = config.q_weight, config.r_weight, config.p_weight
    total = 0.0
    for k in range(n):
        dev = states[k] - problem.reference[k]
        total += float(dev @ q @ dev) + float(controls[k] @ r @ controls[k])
    dev = states[n] - problem.reference[n]
    total += float(dev @ p_w @ dev)
    dev0 = states[0] - problem.reference[0]
    first = float(dev0 @ q @ dev0) + float(controls[0] @ r @ controls[0])
    return total, first


def _assemble_solution(
    problem: NmpcProblem,
    config: MpcConfig,
    relax_level: int,
    model: _Condensed,
    layout: _Layout,
    cost: CostModel,
    z: NDArray,
    states_rows: NDArray,
    iterations: int,
    elapsed: float,
) -> NmpcSolution:
    n = config.n_horizon
    m = model.n_u_dim
    controls = np.clip(
        z[: layout.n_u].reshape(n, m), config.u_bounds[0], config.u_bounds[1]
    )
    states = np.vstack([problem.initial_state, states_rows])
    slacks = layout.slack_values(z)
    defects = z[layout.n_u : layout.n_u + layout.n_d]
    slack_max = 0.0
    by_kind: dict[str, float] = {}
    for i, (kind, _, _) in enumerate(layout.slots):
        val = abs(float(slacks[i]))
        by_kind[kind] = max(by_kind.get(kind, 0.0), val)
        slack_max = max(slack_max, val)
    if layout.n_d:
        d_max = float(np.max(np.abs(defects))) if defects.size else 0.0
        by_kind["defect"] = d_max
        slack_max = max(slack_max, d_max)
    stab = layout.stability
    stability_hard = bool(stab is not None and stab.hard)
    stability_active = False
    if stab is not None:
        value, _, _ = _stability_lhs_grad(
            problem, config, model, layout, states_rows, controls
        )
        slack_here = by_kind.get("stability", 0.0)
        stability_active = value >= stab.bound + slack_here - _FEAS_TOL
    value_function, first_stage = _tracking_values(problem, config, states, controls)
    # the demoted-decrease slack is designed relief, not a ladder relaxation
    ladder_slack = max(
        (val for kind, val in by_kind.items() if kind != "stability"), default=0.0
    )
    if relax_level == 0 and ladder_slack <= _SLACK_TOL:
        status = "optimal"
    else:
        status = f"relaxed{max(relax_level, 1)}"
    return NmpcSolution(
        controls=controls,
        states=states,
        cost=cost.value(z),
        status=status,
        slacks=slack_max,
        solve_time=elapsed,
        value_function=value_function,
        stage_cost_first=first_stage,
        stability_hard=stability_hard,
        stability_active=stability_active,
        sqp_iterations=iterations,
        slack_by_kind=by_kind,
    )


def solve_sqp(
    problem: NmpcProblem,
    config: MpcConfig,
    relax_level: int = 0,
    warm_start: NDArray | None = None,
) -> NmpcSolution:
    """Solve one step at a fixed relaxation level.

    Re-linearizes the obstacle rows at each iterate and solves the
    dense QP until the iterate settles, keeping the best iterate whose
    underlying constraints hold to 1e-6.  The cost-decrease left side
    is convex quadratic in the decision vector and is handled exactly
    through a scalar multiplier search rather than a single moving cut,
    both hard and demoted-soft.  When no row depends on the iterate a
    single QP solve finishes the job.  Raises QpInfeasibleError when no
    feasible iterate is found.
    """
    t_start = perf_counter()
    _validate(problem, config)
    model = _condense(problem, config, with_defects=relax_level == 2)
    layout = _build_layout(problem, config, relax_level, model)
    cost = _build_cost(problem, config, model, layout)
    stab_quad = None
    stab_slot = -1
    if layout.stability is not None:
        stab_quad = _stability_quadratic(problem, config, model, layout)
        if not layout.stability.hard:
            stab_slot = (
                layout.n_u + layout.n_d + layout.slots.index(("stability", 0, 0))
            )
    anchored_rows = bool(problem.static_obstacles or problem.moving_regions)
    n = config.n_horizon
    m = model.n_u_dim
    z = np.zeros(layout.n_vars)
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float)
        if warm.shape == (n, m):
            z[: layout.n_u] = np.clip(
                warm.reshape(-1), config.u_bounds[0], config.u_bounds[1]
            )
    states = model.states_of(z, layout.n_u, layout.n_d)
    controls = z[: layout.n_u].reshape(n, m)
    best: tuple[float, NDArray, NDArray] | None = None
    iterations = 0
    lam_prev = 0.0
    best_viol = np.inf
    stall = 0
    for _ in range(_MAX_SQP_ITER):
        iterations += 1
        try:
            cons = build_constraints(
                problem,
                config,
                relax_level,
                states_iter=states,
                controls_iter=controls,
                model=model,
                layout=layout,
            )
            if stab_quad is None:
                result = solve_qp(cost.h, cost.g, c_in=cons.c_mat, b_in=cons.b_vec)
                z_new = result.x
            else:
                h_q, g_q, q0 = stab_quad
                z_new, s_star, lam_prev = _solve_decrease_qcqp(
                    cost,
                    cons.c_mat[:-1],
                    cons.b_vec[:-1],
                    h_q,
                    g_q,
                    q0,
                    layout.stability.bound,
                    rho=None if layout.stability.hard else config.rho,
                    lam_init=lam_prev,
                )
                if stab_slot >= 0:
                    z_new = z_new.copy()
                    z_new[stab_slot] = s_star
        except QpInfeasibleError:
            if best is not None:
                break
            raise
        states_new = model.states_of(z_new, layout.n_u, layout.n_d)
        controls_new = z_new[: layout.n_u].reshape(n, m)
        viol = _true_violation(
            z_new, states_new, controls_new, cons, problem, config, layout, model
        )
        if viol <= _FEAS_TOL:
            value = cost.value(z_new)
            if best is None or value < best[0]:
                best = (value, z_new.copy(), states_new.copy())
        step = float(np.max(np.abs(z_new - z))) if z.size else 0.0
        z = z_new
        states = states_new
        controls = controls_new
        if not anchored_rows:
            break
        if step <= _STEP_TOL * (1.0 + float(np.max(np.abs(z)))):
            break
        # oscillating linearizations make no feasibility progress; stop
        # re-cutting once several passes fail to improve the worst residual
        if not np.isfinite(best_viol) or viol <= best_viol - max(
            1e-9, 0.05 * best_viol
        ):
            best_viol = viol
            stall = 0
        else:
            stall += 1
            if stall >= 6:
                break
    if best is None:
        raise QpInfeasibleError("no feasible iterate at this relaxation level")
    _, z_best, states_best = best
    return _assemble_solution(
        problem,
        config,
        relax_level,
        model,
        layout,
        cost,
        z_best,
        states_best,
        iterations,
        perf_counter() - t_start,
    )


def _fallback_solution(
    problem: NmpcProblem, config: MpcConfig, elapsed: float
) -> NmpcSolution:
    """Hold the previously applied input, clamped to the input box."""
    a_d, b_d = problem.linear_model
    n = config.n_horizon
    m = b_d.shape[1]
    if problem.prev_solution is not None and problem.prev_solution.controls.shape[1] == m:
        u_hold = np.clip(
            problem.prev_solution.controls[0], config.u_bounds[0], config.u_bounds[1]
        )
    else:
        u_hold = np.zeros(m)
    controls = np.tile(u_hold, (n, 1))
    states = np.empty((n + 1, a_d.shape[0]))
    states[0] = problem.initial_state
    for k in range(n):
        states[k + 1] = a_d @ states[k] + b_d @ u_hold
    value_function, first_stage = _tracking_values(problem, config, states, controls)
    return NmpcSolution(
        controls=controls,
        states=states,
        cost=value_function,
        status="fallback",
        slacks=0.0,
        solve_time=elapsed,
        value_function=value_function,
        stage_cost_first=first_stage,
        stability_hard=False,
        stability_active=False,
        sqp_iterations=0,
        slack_by_kind=None,
    )


def solve_step(problem: NmpcProblem, config: MpcConfig) -> NmpcSolution:
    """Solve one control step with escalation and fallback.

    Tries relaxation level 0 first; each further level is attempted
    only while the attempt count stays within `n_set` and the elapsed
    time stays within `t_max`.  When every attempt fails (or the time
    budget is already spent) the previous applied input is held,
    clamped to the input box, so a control is always returned.
    """
    t_start = perf_counter()
    _validate(problem, config)
    prev = problem.prev_solution
    warm = None
    n = config.n_horizon
    m = problem.linear_model[1].shape[1]
    if prev is not None and prev.controls.shape == (n, m):
        warm = np.vstack([prev.controls[1:], prev.controls[-1:]])
    for level in range(min(config.n_set, 2) + 1):
        if perf_counter() - t_start > config.t_max:
            break
        try:
            solution = solve_sqp(problem, config, level, warm)
        except QpInfeasibleError:
            continue
        return replace(solution, solve_time=perf_counter() - t_start)
    return _fallback_solution(problem, config, perf_counter() - t_start)


__all__ = [
    "MpcConfig",
    "NmpcProblem",
    "NmpcSolution",
    "StabilityData",
    "StabilityDemotedWarning",
    "ConstraintSet",
    "CostModel",
    "build_cost",
    "build_constraints",
    "stability_constraint",
    "static_obstacle_halfspace",
    "solve_sqp",
    "solve_step",
]
