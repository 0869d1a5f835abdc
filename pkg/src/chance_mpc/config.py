"""Run configuration: a nested key-value tree with strict parsing.

Every knob of a run lives in one document of plain scalars and lists,
organized into sections that mirror the objects they build.  Parsing is
strict: unknown keys fail with their dotted path, missing keys fall
back to the stock defaults, and parse -> serialize -> parse is the
identity on documents.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .features import FeatureSpec
from .nmpc import MpcConfig
from .quad import QuadParams
from .sim import Scenario, benchmark_scenario
from .vbgmm import VbgmmPrior


class ConfigError(ValueError):
    """Invalid configuration document; the message carries the key path."""


@dataclass(frozen=True)
class CorpusSection:
    n_traj: int = 1000
    env_seed: int = 7
    n_samples: int = 201
    dt: float = 0.05
    test_fraction: float = 0.125


@dataclass(frozen=True)
class FeatureSection:
    degree: int = 4
    n_samples: int = 201
    history_fraction: float = 0.7
    future_fraction: float = 0.4
    overlap_fraction: float = 0.1


@dataclass(frozen=True)
class PriorSection:
    alpha0: float = 1.0
    beta0: float = 1.0
    nu0: float = 5.0
    k_init: int = 30
    tol: float = 1e-8
    max_iter: int = 500


@dataclass(frozen=True)
class MpcSection:
    n_horizon: int = 25
    phi: float = 0.05
    d_safe: float = 2.0
    confidence: float = 0.95
    v_bounds: tuple = (-5.0, 5.0)
    u_bounds: tuple = (-2.0, 2.0)
    du_bounds: tuple = (-1.96, 1.96)
    roll_bounds: tuple = (-3.141592653589793, 3.141592653589793)
    pitch_bounds: tuple = (-1.5707963267948966, 1.5707963267948966)
    yaw_bounds: tuple = (-3.141592653589793, 3.141592653589793)
    q_diag: tuple = (1.0,) * 12
    r_diag: tuple = (1.0,) * 4
    p_diag: tuple = (1.0,) * 12
    t_max: float = 0.2
    n_set: int = 2
    rho: float = 1e3
    e_margin: float = 1e-4
    inflate_moving_regions: bool = False


@dataclass(frozen=True)
class QuadSection:
    mass: float = 0.8
    gravity: float = 9.81
    inertia: tuple = (0.0244, 0.0244, 0.0436)
    arm: float = 0.162
    drag: float = 2.17e-3


@dataclass(frozen=True)
class ScenarioSection:
    seed: int = 0
    duration: float = 20.0
    dt: float = 0.05
    n_static: int = 10
    n_moving: int = 3
    detection_radius: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    prior: PriorSection = field(default_factory=PriorSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    quad: QuadSection = field(default_factory=QuadSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)


_SECTIONS = {
    "corpus": CorpusSection,
    "features": FeatureSection,
    "prior": PriorSection,
    "mpc": MpcSection,
    "quad": QuadSection,
    "scenario": ScenarioSection,
}


def _coerce(value, default, path: str):
    """Match `value` to the type shape of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(value) != len(default):
            raise ConfigError(
                f"{path}: expected {len(default)} entries, got {len(value)}"
            )
        out = []
        for i, item in enumerate(value):
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(f"{path}[{i}]: expected a number, got {item!r}")
            out.append(float(item))
        return tuple(out)
    raise ConfigError(f"{path}: unsupported field type")


def _parse_section(cls, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping, got {doc!r}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    defaults = cls()
    values = {}
    for name in names:
        if name in doc:
            values[name] = _coerce(doc[name], getattr(defaults, name), f"{path}.{name}")
    return cls(**values)


def config_from_dict(doc: dict | None) -> RunConfig:
    """Build a RunConfig from a nested document, strictly."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config root: expected a mapping, got {doc!r}")
    known = {"seed", "out_dir"} | set(_SECTIONS)
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
    defaults = RunConfig()
    values = {}
    if "seed" in doc:
        values["seed"] = _coerce(doc["seed"], defaults.seed, "seed")
    if "out_dir" in doc:
        values["out_dir"] = _coerce(doc["out_dir"], defaults.out_dir, "out_dir")
    for name, cls in _SECTIONS.items():
        if name in doc:
            values[name] = _parse_section(cls, doc[name], name)
    return RunConfig(**values)


def config_to_dict(config: RunConfig) -> dict:
    """Full nested document, every key explicit."""
    doc: dict = {"seed": config.seed, "out_dir": config.out_dir}
    for name in _SECTIONS:
        section = getattr(config, name)
        doc[name] = {
            f.name: (
                list(v) if isinstance(v := getattr(section, f.name), tuple) else v
            )
            for f in dataclasses.fields(section)
        }
    return doc


def load_config(path) -> RunConfig:
    """Parse a config file; an empty document means all defaults."""
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))


def make_feature_spec(config: RunConfig) -> FeatureSpec:
    f = config.features
    return FeatureSpec(
        degree=f.degree,
        n_samples=f.n_samples,
        history_fraction=f.history_fraction,
        future_fraction=f.future_fraction,
        overlap_fraction=f.overlap_fraction,
    )


def make_mpc_config(config: RunConfig) -> MpcConfig:
    m = config.mpc
    return MpcConfig(
        n_horizon=m.n_horizon,
        q_weight=np.diag(m.q_diag),
        r_weight=np.diag(m.r_diag),
        p_weight=np.diag(m.p_diag),
        phi=m.phi,
        d_safe=m.d_safe,
        v_bounds=m.v_bounds,
        u_bounds=m.u_bounds,
        du_bounds=m.du_bounds,
        angle_bounds=(m.roll_bounds, m.pitch_bounds, m.yaw_bounds),
        t_max=m.t_max,
        n_set=m.n_set,
        rho=m.rho,
        e_margin=m.e_margin,
        confidence=m.confidence,
        inflate_moving_regions=m.inflate_moving_regions,
    )


def make_quad_params(config: RunConfig) -> QuadParams:
    q = config.quad
    return QuadParams(
        m=q.mass, g=q.gravity, J=np.asarray(q.inertia), arm=q.arm, drag=q.drag
    )


def make_scenario(config: RunConfig) -> Scenario:
    s = config.scenario
    return benchmark_scenario(
        seed=s.seed,
        duration=s.duration,
        dt=s.dt,
        n_static=s.n_static,
        n_moving=s.n_moving,
        detection_radius=s.detection_radius,
    )


def make_prior(data: np.ndarray, config: RunConfig) -> VbgmmPrior:
    """Data-driven mixture prior under the configured hyperparameters.

    The mean and scale matrix center on the training sample; nu0 is
    lifted to the feature dimension when the configured value would
    make the Wishart prior improper.
    """
    p = config.prior
    d = data.shape[1]
    return VbgmmPrior(
        alpha0=p.alpha0,
        beta0=p.beta0,
        nu0=max(p.nu0, float(d)),
        m0=data.mean(axis=0),
        w0=np.linalg.inv(np.cov(data.T) + 1e-9 * np.eye(d)),
        k_init=p.k_init,
    )


__all__ = [
    "ConfigError",
    "CorpusSection",
    "FeatureSection",
    "MpcSection",
    "PriorSection",
    "QuadSection",
    "RunConfig",
    "ScenarioSection",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "make_feature_spec",
    "make_mpc_config",
    "make_prior",
    "make_quad_params",
    "make_scenario",
    "save_config",
]
