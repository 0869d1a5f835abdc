"""Closed-loop experiment engine.

Synthetic trajectory corpus generation, scripted obstacle worlds, and
the receding-horizon tracking loop with and without obstacle-motion
prediction, logged in a fixed columnar layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from time import perf_counter

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from .features import FeatureSpec, predict_obstacle
from .nmpc import MpcConfig, NmpcProblem, solve_step
from .quad import QuadParams, discrete_model, step
from .trajectories import TrajectorySeries
from .vbgmm import VbgmmPosterior

_N_WAYPOINTS = 9
_WAYPOINT_JITTER = 0.05
_START_BOX = ((-20.0, 20.0), (-20.0, 20.0), (2.0, 12.0))
_CRUISE_SPEEDS = (0.9, 2.0)
_CLIMB_SPEED = 1.3
_CLIMB_RATE = 0.12
_ARC_SPEED = 1.5
_ARC_RATE = 0.3
_WAVE_SPEED = 1.5
_WEAVE_AMP = 1.6
_PORPOISE_AMP = 0.9
_WAVE_FREQ = 0.11
# empirical generator contract: ||second difference|| / dt^2 stays below this
MAX_CORPUS_ACCEL = 5.0
_MOVING_CAP = 10.0

_STATE_COLUMNS = (
    "x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi", "wx", "wy", "wz"
)
_INPUT_COLUMNS = ("u_1", "u_2", "u_3", "u_4")


def _random_trajectory(rng: np.random.Generator, n_samples: int, dt: float) -> TrajectorySeries:
    """Waypoint-spline trajectory drawn from a small set of maneuver modes.

    Ten discrete modes (level cruise at two speeds, climbing and
    descending cruise, left and right arcs, lateral weave and vertical
    porpoise at two phases) with small parameter jitter.  The discrete
    modes give the corpus a finite cluster structure that a mixture
    seeded with surplus components can prune down to, while a history
    window identifies the mode well enough to make the future
    informative.
    """
    lo = np.array([b[0] for b in _START_BOX])
    hi = np.array([b[1] for b in _START_BOX])
    start = rng.uniform(lo, hi)
    duration = (n_samples - 1) * dt
    t_way = np.linspace(0.0, duration, _N_WAYPOINTS)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    mode = int(rng.integers(10))
    jitter = 1.0 + 0.05 * rng.uniform(-1.0, 1.0)
    across = np.zeros_like(t_way)
    climb = np.zeros_like(t_way)
    if mode < 4:
        speed = (_CRUISE_SPEEDS[mode] if mode < 2 else _CLIMB_SPEED) * jitter
        along = speed * t_way
        if mode >= 2:
            rate = _CLIMB_RATE * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
            climb = (rate if mode == 2 else -rate) * t_way
    elif mode < 6:
        speed = _ARC_SPEED * jitter
        turn = _ARC_RATE * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
        omega = turn if mode == 4 else -turn
        along = speed / omega * np.sin(omega * t_way)
        across = speed / omega * (1.0 - np.cos(omega * t_way))
    else:
        speed = _WAVE_SPEED * jitter
        along = speed * t_way
        amp = (_WEAVE_AMP if mode < 8 else _PORPOISE_AMP) * (
            1.0 + 0.08 * rng.uniform(-1.0, 1.0)
        )
        freq = _WAVE_FREQ * (1.0 + 0.08 * rng.uniform(-1.0, 1.0))
        phase = (0.0 if mode % 2 == 0 else np.pi) + 0.1 * rng.uniform(-1.0, 1.0)
        wave = amp * (np.sin(2.0 * np.pi * freq * t_way + phase) - np.sin(phase))
        if mode < 8:
            across = wave
        else:
            climb = wave
    c, s = np.cos(yaw), np.sin(yaw)
    points = np.stack(
        [
            start[0] + c * along - s * across,
            start[1] + s * along + c * across,
            start[2] + climb,
        ],
        axis=1,
    )
    points += rng.normal(scale=_WAYPOINT_JITTER, size=points.shape)
    spline = CubicSpline(t_way, points, axis=0, bc_type="natural")
    times = np.arange(n_samples) * dt
    return TrajectorySeries(times=times, positions=spline(times))


def generate_corpus(
    n_traj: int, env_seed: int, n_samples: int = 201, dt: float = 0.05
) -> list[TrajectorySeries]:
    """Deterministic list of smooth random 3D trajectories."""
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    rng = np.random.default_rng(env_seed)
    return [_random_trajectory(rng, n_samples, dt) for _ in range(n_traj)]


def split_corpus(
    corpus: list[TrajectorySeries], test_fraction: float = 0.125
) -> tuple[list[TrajectorySeries], list[TrajectorySeries]]:
    """Leading train / trailing test split at the given fraction."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    n_test = int(round(len(corpus) * test_fraction))
    n_train = len(corpus) - n_test
    return list(corpus[:n_train]), list(corpus[n_train:])


@dataclass(frozen=True)
class Scenario:
    """World description for one closed-loop run.

    The reference series drives the host; moving obstacles follow
    pre-scripted trajectories sampled at the reference interval.
    """

    reference: TrajectorySeries
    duration: float
    static_obstacles: tuple[NDArray, ...] = ()
    moving_obstacles: tuple[TrajectorySeries, ...] = ()
    detection_radius: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.detection_radius > 0:
            raise ValueError("detection radius must be positive")
        statics = tuple(np.asarray(c, dtype=float) for c in self.static_obstacles)
        for c in statics:
            if c.shape != (3,) or not np.all(np.isfinite(c)):
                raise ValueError("static obstacle centers must be finite 3-vectors")
        object.__setattr__(self, "static_obstacles", statics)
        movers = tuple(self.moving_obstacles)
        dt = self.reference.dt
        for script in movers:
            if abs(script.dt - dt) > 1e-9 * max(1.0, dt):
                raise ValueError(
                    "moving obstacle scripts must share the reference sampling interval"
                )
        object.__setattr__(self, "moving_obstacles", movers)

    @property
    def dt(self) -> float:
        return self.reference.dt

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True)
class RunLog:
    """Per-step closed-loop records in a fixed column layout.

    `stability_hard` and the abort marker are in-memory diagnostics;
    the exported table carries exactly the documented columns, so a
    log read back from text has those fields reset.
    """

    times: NDArray
    states: NDArray
    controls: NDArray
    errors: NDArray
    d_static: NDArray
    d_moving: NDArray
    statuses: tuple[str, ...]
    t_comp: NDArray
    v_n: NDArray
    stability_hard: NDArray
    aborted: bool = False
    note: str = ""

    def __post_init__(self):
        n = self.times.shape[0]
        shapes = {
            "times": (self.times, (n,)),
            "states": (self.states, (n, 12)),
            "controls": (self.controls, (n, 4)),
            "errors": (self.errors, (n, 3)),
            "d_static": (self.d_static, (n,)),
            "t_comp": (self.t_comp, (n,)),
            "v_n": (self.v_n, (n,)),
            "stability_hard": (self.stability_hard, (n,)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}")
        if self.d_moving.ndim != 2 or self.d_moving.shape[0] != n:
            raise ValueError("d_moving must have one row per record")
        if len(self.statuses) != n:
            raise ValueError("statuses must have one entry per record")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def header(self) -> tuple[str, ...]:
        moving = tuple(f"d_mov_{i + 1}" for i in range(self.d_moving.shape[1]))
        return (
            ("t",)
            + _STATE_COLUMNS
            + _INPUT_COLUMNS
            + ("err_x", "err_y", "err_z", "d_static")
            + moving
            + ("status", "t_comp", "V_N")
        )

    def to_csv(self, path=None) -> str:
        lines = [",".join(self.header)]
        for j in range(len(self)):
            fields = [_fmt(self.times[j])]
            fields += [_fmt(v) for v in self.states[j]]
            fields += [_fmt(v) for v in self.controls[j]]
            fields += [_fmt(v) for v in self.errors[j]]
            fields.append(_fmt(self.d_static[j]))
            fields += [_fmt(v) for v in self.d_moving[j]]
            fields.append(self.statuses[j])
            fields.append(_fmt(self.t_comp[j]))
            fields.append(_fmt(self.v_n[j]))
            lines.append(",".join(fields))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_text(cls, text: str) -> "RunLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty log text")
        header = tuple(lines[0].split(","))
        n_o = sum(1 for name in header if name.startswith("d_mov_"))
        want = (
            ("t",)
            + _STATE_COLUMNS
            + _INPUT_COLUMNS
            + ("err_x", "err_y", "err_z", "d_static")
            + tuple(f"d_mov_{i + 1}" for i in range(n_o))
            + ("status", "t_comp", "V_N")
        )
        if header != want:
            bad = next(
                (h for h, w in zip(header, want) if h != w), header[-1] if header else "?"
            )
            raise ValueError(f"unexpected log column {bad!r}")
        n = len(lines) - 1
        times = np.empty(n)
        states = np.empty((n, 12))
        controls = np.empty((n, 4))
        errors = np.empty((n, 3))
        d_static = np.empty(n)
        d_moving = np.empty((n, n_o))
        statuses: list[str] = []
        t_comp = np.empty(n)
        v_n = np.empty(n)
        for j, line in enumerate(lines[1:]):
            parts = line.split(",")
            if len(parts) != len(want):
                raise ValueError(f"log row {j} has {len(parts)} fields, want {len(want)}")
            times[j] = float(parts[0])
            states[j] = [float(v) for v in parts[1:13]]
            controls[j] = [float(v) for v in parts[13:17]]
            errors[j] = [float(v) for v in parts[17:20]]
            d_static[j] = float(parts[20])
            d_moving[j] = [float(v) for v in parts[21 : 21 + n_o]]
            statuses.append(parts[21 + n_o])
            t_comp[j] = float(parts[22 + n_o])
            v_n[j] = float(parts[23 + n_o])
        return cls(
            times=times,
            states=states,
            controls=controls,
            errors=errors,
            d_static=d_static,
            d_moving=d_moving,
            statuses=tuple(statuses),
            t_comp=t_comp,
            v_n=v_n,
            stability_hard=np.zeros(n, dtype=bool),
        )

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        return cls.from_text(Path(path).read_text())


def _fmt(value: float) -> str:
    return "%.17g" % float(value)


def _reference_states(scenario: Scenario, n_horizon: int) -> NDArray:
    """Position/velocity reference rows, extrapolated past the series end
    at the final velocity so horizon windows never see a kink."""
    pos = scenario.reference.positions
    need = scenario.n_steps + n_horizon + 1
    if pos.shape[0] < need:
        v_end = pos[-1] - pos[-2]
        extra = pos[-1] + np.outer(np.arange(1, need - pos.shape[0] + 1), v_end)
        pos = np.vstack([pos, extra])
    else:
        pos = pos[:need]
    vel = np.gradient(pos, scenario.dt, axis=0)
    out = np.zeros((need, 12))
    out[:, :3] = pos
    out[:, 3:6] = vel
    return out


def run_closed_loop(
    scenario: Scenario,
    config: MpcConfig,
    posterior: VbgmmPosterior | None = None,
    mode: str = "with_prediction",
    params: QuadParams | None = None,
    feature_spec: FeatureSpec | None = None,
) -> RunLog:
    """Track the scenario reference, avoiding detected obstacles.

    In prediction mode each detected moving obstacle's trailing history
    window is pushed through the trained mixture to produce predicted
    uncertainty regions over the horizon; before enough history exists,
    and always in the baseline mode, a detected obstacle is treated as
    a static point at its current position.  The first planned input is
    applied to the nonlinear plant each step.
    """
    if mode not in ("with_prediction", "without_prediction"):
        raise ValueError("mode must be with_prediction or without_prediction")
    if mode == "with_prediction" and posterior is None:
        raise ValueError("prediction mode needs a trained posterior")
    if params is None:
        params = QuadParams()
    spec = feature_spec if feature_spec is not None else FeatureSpec()
    dt = scenario.dt
    n_steps = scenario.n_steps
    if n_steps < 1:
        raise ValueError("duration must cover at least one control step")
    if len(scenario.reference) < n_steps + 1:
        raise ValueError("reference must cover the run duration")
    for script in scenario.moving_obstacles:
        if len(script) < n_steps + 1:
            raise ValueError("each moving obstacle script must cover the run duration")
    n_hor = config.n_horizon
    ref_states = _reference_states(scenario, n_hor)
    n_o = len(scenario.moving_obstacles)
    n_h = spec.history_samples
    u_eq = params.m * params.g / 4.0 * np.ones(4)

    x = ref_states[0].copy()
    prev = None
    times = np.empty(n_steps)
    states_log = np.empty((n_steps, 12))
    controls_log = np.empty((n_steps, 4))
    errors = np.empty((n_steps, 3))
    d_static_log = np.empty(n_steps)
    d_moving_log = np.empty((n_steps, n_o))
    statuses: list[str] = []
    t_comp = np.empty(n_steps)
    v_n = np.empty(n_steps)
    stab_hard = np.zeros(n_steps, dtype=bool)
    aborted = False
    note = ""
    n_done = 0
    # obstacles farther than the horizon's worst-case travel cannot
    # constrain any feasible plan, so their rows would only bloat the QP
    reach = config.d_safe + n_hor * dt * config.v_bounds[1] + 1.0
    for j in range(n_steps):
        t0 = perf_counter()
        p_host = x[:3]
        current = [script.positions[j] for script in scenario.moving_obstacles]
        statics = list(scenario.static_obstacles)
        regions = []
        for i, script in enumerate(scenario.moving_obstacles):
            if float(np.linalg.norm(current[i] - p_host)) > scenario.detection_radius:
                continue
            if mode == "without_prediction" or j + 1 < n_h:
                statics.append(np.asarray(current[i], dtype=float))
                continue
            window = TrajectorySeries(
                times=script.times[j + 1 - n_h : j + 1],
                positions=script.positions[j + 1 - n_h : j + 1],
            )
            regions.append(predict_obstacle(posterior, window, n_hor, dt, spec))
        statics = [
            c for c in statics if float(np.linalg.norm(c - p_host)) <= reach
        ]
        a_d, b_d = discrete_model(params, x, dt)
        problem = NmpcProblem(
            initial_state=x,
            reference=ref_states[j : j + n_hor + 1],
            linear_model=(a_d, b_d),
            static_obstacles=tuple(statics),
            moving_regions=tuple(regions),
            prev_solution=prev,
        )
        sol = solve_step(problem, config)
        elapsed = perf_counter() - t0

        times[j] = j * dt
        states_log[j] = x
        controls_log[j] = sol.controls[0]
        errors[j] = p_host - ref_states[j, :3]
        if scenario.static_obstacles:
            d_static_log[j] = min(
                float(np.linalg.norm(p_host - c)) for c in scenario.static_obstacles
            )
        else:
            d_static_log[j] = math.inf
        for i in range(n_o):
            d_moving_log[j, i] = min(
                float(np.linalg.norm(p_host - current[i])), _MOVING_CAP
            )
        statuses.append(sol.status)
        t_comp[j] = elapsed
        v_n[j] = sol.value_function
        stab_hard[j] = sol.stability_hard
        n_done = j + 1

        prev = sol
        x = step(params, x, u_eq + sol.controls[0], dt)
        if not np.all(np.isfinite(x)):
            aborted = True
            note = f"plant state became non-finite after step {j}"
            break
    return RunLog(
        times=times[:n_done],
        states=states_log[:n_done],
        controls=controls_log[:n_done],
        errors=errors[:n_done],
        d_static=d_static_log[:n_done],
        d_moving=d_moving_log[:n_done],
        statuses=tuple(statuses),
        t_comp=t_comp[:n_done],
        v_n=v_n[:n_done],
        stability_hard=stab_hard[:n_done],
        aborted=aborted,
        note=note,
    )


def metrics(log: RunLog) -> dict:
    """Tracking, clearance, timing, and solver-status summary of a run."""
    if len(log) == 0:
        raise ValueError("metrics need a non-empty log")
    err_norm = np.linalg.norm(log.errors, axis=1)
    return {
        "n_steps": len(log),
        "tracking_rms": float(np.sqrt(np.mean(err_norm**2))),
        "tracking_max": float(np.max(err_norm)),
        "min_d_static": float(np.min(log.d_static)),
        "min_d_moving": float(np.min(log.d_moving)) if log.d_moving.size else math.inf,
        "mean_t_comp": float(np.mean(log.t_comp)),
        "max_t_comp": float(np.max(log.t_comp)),
        "n_optimal": sum(1 for s in log.statuses if s == "optimal"),
        "n_relaxed": sum(1 for s in log.statuses if s.startswith("relaxed")),
        "n_fallback": sum(1 for s in log.statuses if s == "fallback"),
        "aborted": bool(log.aborted),
    }


def avoidance_onset(log: RunLog, threshold: float = 0.05) -> int | None:
    """First step with tracking error above threshold once an obstacle is near.

    The scan starts at the first record whose closest moving-obstacle
    distance falls below the logging cap, so start-up transients on an
    empty course never count as avoidance.
    """
    if log.d_moving.size == 0:
        return None
    near = np.min(log.d_moving, axis=1) < _MOVING_CAP
    if not bool(near.any()):
        return None
    start = int(np.argmax(near))
    err_norm = np.linalg.norm(log.errors, axis=1)
    hits = np.nonzero(err_norm[start:] > threshold)[0]
    if hits.size == 0:
        return None
    return int(start + hits[0])


_CROSS_LATERAL_SPEED = 1.9
_CROSS_WINDOW = 1.5
_CROSS_CLEARANCE = 2.5
_CROSS_LAGS = (1.8, 1.9, 1.85)
_CROSS_NUDGE = np.array([0.0, 0.0, 0.04])


def _crossing_mover(
    rng: np.random.Generator,
    n_steps: int,
    dt: float,
    ref_pos: NDArray,
    k: int,
    lag: float,
) -> TrajectorySeries:
    """Corpus-family trajectory re-anchored to cross the path at step k.

    Candidates are drawn until one crosses fast and near-perpendicular
    (horizontal speed across the path tangent above a floor at the
    anchor) and stays clear of the reference outside a short window
    around the crossing, so each encounter is one brief transversal
    pass.  The accepted candidate is shifted so that at the anchor step
    it sits `lag` meters short of the path point along its own velocity:
    the remaining approach happens along the direction its motion is
    least certain in, which is what a predictive controller must budget
    for while a purely reactive one still sees a clear gap.  The speed
    floor relaxes after many rejections so generation always terminates.
    """
    tangent = ref_pos[k + 1] - ref_pos[k - 1]
    tangent = tangent / np.linalg.norm(tangent)
    floor = _CROSS_LATERAL_SPEED
    times = np.arange(n_steps + 1) * dt
    outside = np.abs(times - k * dt) > _CROSS_WINDOW
    for attempt in range(1, 2001):
        base = _random_trajectory(rng, n_steps + 1, dt)
        v = (base.positions[k + 1] - base.positions[k - 1]) / (2.0 * dt)
        v_lat = v - float(v @ tangent) * tangent
        if float(np.hypot(v_lat[0], v_lat[1])) < floor:
            if attempt % 400 == 0:
                floor *= 0.85
            continue
        target = ref_pos[k] - lag * v / float(np.linalg.norm(v)) + _CROSS_NUDGE
        positions = base.positions + (target - base.positions[k])
        gap = np.linalg.norm(positions - ref_pos, axis=1)
        if bool(outside.any()) and float(np.min(gap[outside])) < _CROSS_CLEARANCE:
            continue
        return TrajectorySeries(times=times, positions=positions)
    raise RuntimeError("could not draw a crossing moving obstacle")


def benchmark_scenario(
    seed: int = 0,
    duration: float = 20.0,
    dt: float = 0.05,
    n_static: int = 10,
    n_moving: int = 3,
    detection_radius: float = 10.0,
) -> Scenario:
    """Clustered world: straight host reference with off-path pillars and
    corpus-family moving obstacles that cross the path mid-run."""
    rng = np.random.default_rng(seed)
    n_steps = int(round(duration / dt))
    t_ref = np.arange(n_steps + 1) * dt
    speed = 1.5
    start = np.array([-15.0, 0.0, 5.0])
    ref_pos = start + np.outer(t_ref * speed, np.array([1.0, 0.0, 0.0]))
    reference = TrajectorySeries(times=t_ref, positions=ref_pos)
    statics: list[NDArray] = []
    while len(statics) < n_static:
        c = rng.uniform([-14.0, -6.0, 2.0], [14.0, 6.0, 8.0])
        if float(np.min(np.linalg.norm(ref_pos - c, axis=1))) < 3.5:
            continue
        if statics and min(float(np.linalg.norm(c - s)) for s in statics) < 2.0:
            continue
        statics.append(c)
    crossing_times = np.linspace(0.45, 0.85, n_moving) * duration
    movers: list[TrajectorySeries] = []
    for i in range(n_moving):
        k = int(round(crossing_times[i] / dt))
        lag = _CROSS_LAGS[i % len(_CROSS_LAGS)]
        movers.append(_crossing_mover(rng, n_steps, dt, ref_pos, k, lag))
    return Scenario(
        reference=reference,
        duration=duration,
        static_obstacles=tuple(statics),
        moving_obstacles=tuple(movers),
        detection_radius=detection_radius,
        seed=seed,
    )


__all__ = [
    "MAX_CORPUS_ACCEL",
    "RunLog",
    "Scenario",
    "avoidance_onset",
    "benchmark_scenario",
    "generate_corpus",
    "metrics",
    "run_closed_loop",
    "split_corpus",
]
