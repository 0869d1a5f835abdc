"""Command-line pipeline: corpus generation, training, evaluation, simulation.

Subcommands share one config file; outputs land in the config's
out_dir (or --out) so later stages find earlier stages' files.  Exit
codes: 0 success, 1 invalid input or usage, 2 runtime failure, 3 a
strictness check tripped.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    RunConfig,
    load_config,
    make_feature_spec,
    make_mpc_config,
    make_prior,
    make_quad_params,
    make_scenario,
)
from .features import build_training_matrix, predict_obstacle
from .sim import (
    avoidance_onset,
    generate_corpus,
    metrics,
    run_closed_loop,
    split_corpus,
)
from .trajectories import TrajectorySeries
from .vbgmm import fit, load_posterior, save_posterior

_LOG = logging.getLogger("chance_mpc")
_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_STRICT = 3

_MODES = ("with_prediction", "without_prediction")


class CliError(ValueError):
    """Bad usage or invalid inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _configure_logging() -> None:
    raw = os.environ.get("CHANCE_MPC_LOG_LEVEL", "info").strip().lower()
    if raw not in _LOG_LEVELS:
        raise CliError(
            "CHANCE_MPC_LOG_LEVEL must be one of error/warn/info/debug, "
            f"got {raw!r}"
        )
    logging.basicConfig(
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    logging.getLogger().setLevel(_LOG_LEVELS[raw])
    logging.captureWarnings(True)


def _load_run_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return load_config(args.config)


def _out_dir(args, config: RunConfig) -> Path:
    return Path(args.out if args.out is not None else config.out_dir)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _trajectory_text(traj: TrajectorySeries) -> str:
    rows = ["t,x,y,z"]
    for t, p in zip(traj.times, traj.positions):
        rows.append(",".join(format(v, ".17g") for v in (t, p[0], p[1], p[2])))
    return "\n".join(rows) + "\n"


def _trajectory_from_text(text: str, path) -> TrajectorySeries:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "t,x,y,z":
        raise CliError(f"{path}: not a trajectory file (expected t,x,y,z header)")
    data = np.array(
        [[float(v) for v in line.split(",")] for line in lines[1:]], dtype=float
    )
    return TrajectorySeries(times=data[:, 0], positions=data[:, 1:4])


def _corpus_dir(args, out: Path) -> Path:
    return Path(args.corpus) if args.corpus is not None else out / "corpus"


def _model_path(args, out: Path) -> Path:
    return Path(args.model) if args.model is not None else out / "model.json"


def _read_corpus(corpus_dir: Path) -> tuple[list[TrajectorySeries], dict]:
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.is_file():
        raise CliError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    count = int(manifest["count"])
    corpus = []
    digest = hashlib.sha256()
    for i in range(count):
        path = corpus_dir / f"traj_{i:05d}.csv"
        if not path.is_file():
            raise CliError(f"corpus file missing: {path}")
        text = path.read_text()
        digest.update(text.encode())
        corpus.append(_trajectory_from_text(text, path))
    if digest.hexdigest() != manifest.get("digest"):
        raise CliError(f"corpus files do not match the manifest digest in {corpus_dir}")
    return corpus, manifest


def _obstacle_digest(scenario) -> str:
    digest = hashlib.sha256()
    for script in scenario.moving_obstacles:
        digest.update(np.ascontiguousarray(script.times).tobytes())
        digest.update(np.ascontiguousarray(script.positions).tobytes())
    return digest.hexdigest()


def _build_scenario(config: RunConfig, seed_override: int | None):
    if seed_override is None:
        return make_scenario(config)
    section = dataclasses.replace(config.scenario, seed=seed_override)
    return make_scenario(dataclasses.replace(config, scenario=section))


def _features_doc(config: RunConfig) -> dict:
    return {f.name: getattr(config.features, f.name)
            for f in dataclasses.fields(config.features)}


def _cmd_gen_data(args) -> int:
    config = _load_run_config(args)
    c = config.corpus
    if c.n_traj < 1:
        raise CliError("corpus.n_traj must be at least 1")
    seed = args.seed if args.seed is not None else c.env_seed
    corpus = generate_corpus(c.n_traj, env_seed=seed, n_samples=c.n_samples, dt=c.dt)
    train, test = split_corpus(corpus, c.test_fraction)
    out = _out_dir(args, config) / "corpus"
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for i, traj in enumerate(corpus):
        text = _trajectory_text(traj)
        (out / f"traj_{i:05d}.csv").write_text(text)
        digest.update(text.encode())
    manifest = {
        "format": "chance-mpc-corpus",
        "count": len(corpus),
        "seed": seed,
        "n_samples": c.n_samples,
        "dt": c.dt,
        "test_fraction": c.test_fraction,
        "n_train": len(train),
        "n_test": len(test),
        "digest": digest.hexdigest(),
    }
    _write_json(out / "manifest.json", manifest)
    _LOG.info(
        "wrote %d trajectories (%d train / %d test) to %s",
        len(corpus), len(train), len(test), out,
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, config)
    corpus, manifest = _read_corpus(_corpus_dir(args, out))
    spec = make_feature_spec(config)
    if int(manifest["n_samples"]) != spec.n_samples:
        raise CliError(
            f"corpus sample count {manifest['n_samples']} does not match "
            f"features.n_samples {spec.n_samples}"
        )
    train, _ = split_corpus(corpus, config.corpus.test_fraction)
    data = build_training_matrix(train, spec)
    prior = make_prior(data, config)
    seed = args.seed if args.seed is not None else config.seed
    _LOG.info("fitting %d-component mixture on %s", prior.k_init, data.shape)
    posterior = fit(
        data, prior, seed=seed, tol=config.prior.tol, max_iter=config.prior.max_iter
    )
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "format": "chance-mpc-train-report",
        "n_train": data.shape[0],
        "dim": data.shape[1],
        "k_init": prior.k_init,
        "dominant_count": posterior.dominant_count,
        "converged": posterior.converged,
        "n_iterations": len(posterior.elbo_trace),
        "elbo_trace": [float(v) for v in posterior.elbo_trace],
        "seed": seed,
    }
    _write_json(out / "train_report.json", report)
    model_path = _model_path(args, out)
    save_posterior(
        model_path,
        posterior,
        extra={
            "features": _features_doc(config),
            "corpus_digest": manifest["digest"],
            "dt": manifest["dt"],
            "seed": seed,
        },
    )
    if not posterior.converged:
        _LOG.error(
            "fit did not converge in %d iterations; model and report retained",
            len(posterior.elbo_trace),
        )
        return EXIT_RUNTIME
    _LOG.info(
        "converged in %d iterations, %d of %d components dominant",
        len(posterior.elbo_trace), posterior.dominant_count, prior.k_init,
    )
    return EXIT_OK


def _load_model(args, config: RunConfig, out: Path):
    path = _model_path(args, out)
    if not path.is_file():
        raise CliError(f"prediction mode needs a model file, none at {path}")
    posterior, extra = load_posterior(path)
    stored = extra.get("features")
    if stored is not None and stored != _jsonable(_features_doc(config)):
        raise CliError(
            f"model at {path} was trained under different feature settings"
        )
    return posterior


def _cmd_predict_eval(args) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, config)
    corpus, manifest = _read_corpus(_corpus_dir(args, out))
    spec = make_feature_spec(config)
    if int(manifest["n_samples"]) != spec.n_samples:
        raise CliError(
            f"corpus sample count {manifest['n_samples']} does not match "
            f"features.n_samples {spec.n_samples}"
        )
    posterior = _load_model(args, config, out)
    _, test = split_corpus(corpus, config.corpus.test_fraction)
    if not test:
        raise CliError("test split is empty; nothing to evaluate")
    dt = float(manifest["dt"])
    n_h = spec.history_samples
    n_pred = min(spec.max_horizon_steps, spec.n_samples - n_h)
    per_sample = []
    for traj in test:
        history = TrajectorySeries(
            times=traj.times[:n_h], positions=traj.positions[:n_h]
        )
        predicted = predict_obstacle(posterior, history, n_pred, dt, spec)
        truth = traj.positions[n_h : n_h + n_pred]
        err = np.linalg.norm(predicted.means - truth, axis=1)
        per_sample.append(float(np.sqrt(np.mean(err**2))))
    report = {
        "format": "chance-mpc-predict-report",
        "n_eval": len(test),
        "horizon_steps": n_pred,
        "dt": dt,
        "mean_rms": float(np.mean(per_sample)),
        "max_rms": float(np.max(per_sample)),
        "per_sample_rms": per_sample,
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "predict_report.json", report)
    _LOG.info(
        "prediction RMS over %d held-out trajectories: mean %.3f m, worst %.3f m",
        len(test), report["mean_rms"], report["max_rms"],
    )
    return EXIT_OK


def _run_one_mode(config: RunConfig, scenario, mode: str, posterior, out: Path):
    log = run_closed_loop(
        scenario,
        make_mpc_config(config),
        posterior=posterior,
        mode=mode,
        params=make_quad_params(config),
        feature_spec=make_feature_spec(config),
    )
    summary = dict(metrics(log))
    summary["format"] = "chance-mpc-run-summary"
    summary["mode"] = mode
    summary["scenario_seed"] = scenario.seed
    summary["obstacle_digest"] = _obstacle_digest(scenario)
    summary["avoidance_onset"] = avoidance_onset(log)
    summary["note"] = log.note
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / f"run_{mode}.csv")
    _write_json(out / f"summary_{mode}.json", summary)
    _LOG.info(
        "%s: rms %.3f m, min static %.2f m, mean solve %.3f s -> %s",
        mode,
        summary["tracking_rms"],
        summary["min_d_static"],
        summary["mean_t_comp"],
        out / f"run_{mode}.csv",
    )
    return log, summary


def _cmd_simulate(args) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, config)
    mode = args.mode.replace("-", "_")
    posterior = _load_model(args, config, out) if mode == "with_prediction" else None
    scenario = _build_scenario(config, args.seed)
    log, summary = _run_one_mode(config, scenario, mode, posterior, out)
    if summary["aborted"]:
        _LOG.error("run aborted: %s", log.note)
        return EXIT_RUNTIME
    if args.strict and summary["n_fallback"] > 0:
        _LOG.error("strict mode: %d fallback steps", summary["n_fallback"])
        return EXIT_STRICT
    return EXIT_OK


def _onset_ordering_holds(with_onset, without_onset) -> bool:
    if without_onset is None:
        return True
    if with_onset is None:
        return False
    return with_onset <= without_onset


def _cmd_compare(args) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, config)
    posterior = _load_model(args, config, out)
    scenario = _build_scenario(config, args.seed)
    results = {}
    for mode in _MODES:
        post = posterior if mode == "with_prediction" else None
        _, results[mode] = _run_one_mode(config, scenario, mode, post, out)
    s_with = results["with_prediction"]
    s_without = results["without_prediction"]
    checks = {
        "onset_with_le_without": _onset_ordering_holds(
            s_with["avoidance_onset"], s_without["avoidance_onset"]
        ),
        "rms_with_le_without": s_with["tracking_rms"] <= s_without["tracking_rms"],
    }
    comparison = {
        "format": "chance-mpc-comparison",
        "scenario_seed": scenario.seed,
        "obstacle_digest": _obstacle_digest(scenario),
        "modes": results,
        "checks": checks,
    }
    _write_json(out / "comparison.json", comparison)
    _LOG.info(
        "comparison: onset %s vs %s, rms %.3f vs %.3f, checks %s",
        s_with["avoidance_onset"],
        s_without["avoidance_onset"],
        s_with["tracking_rms"],
        s_without["tracking_rms"],
        checks,
    )
    if s_with["aborted"] or s_without["aborted"]:
        return EXIT_RUNTIME
    if args.strict:
        fallbacks = s_with["n_fallback"] + s_without["n_fallback"]
        if fallbacks > 0 or not all(checks.values()):
            _LOG.error("strict mode: fallbacks=%d checks=%s", fallbacks, checks)
            return EXIT_STRICT
    return EXIT_OK


def _add_common(parser) -> None:
    parser.add_argument("--config", help="config file; omitted keys use defaults")
    parser.add_argument(
        "--seed", type=int, help="override the command's seed from the config"
    )
    parser.add_argument("--out", help="output directory (default: config out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chance-mpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the trajectory corpus and manifest")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit the mixture model on the corpus")
    _add_common(p)
    p.add_argument("--corpus", help="corpus directory (default: <out>/corpus)")
    p.add_argument("--model", help="model file to write (default: <out>/model.json)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "predict-eval", help="prediction error on the held-out corpus split"
    )
    _add_common(p)
    p.add_argument("--corpus", help="corpus directory (default: <out>/corpus)")
    p.add_argument("--model", help="model file to read (default: <out>/model.json)")
    p.set_defaults(func=_cmd_predict_eval)

    p = sub.add_parser("simulate", help="closed-loop run in one mode")
    _add_common(p)
    p.add_argument(
        "--mode",
        required=True,
        choices=["with-prediction", "without-prediction"],
        help="obstacle handling mode",
    )
    p.add_argument("--model", help="model file to read (default: <out>/model.json)")
    p.add_argument(
        "--strict", action="store_true", help="exit 3 if any solver step fell back"
    )
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("compare", help="run both modes on one scenario and compare")
    _add_common(p)
    p.add_argument("--model", help="model file to read (default: <out>/model.json)")
    p.add_argument(
        "--strict",
        action="store_true",
        help="exit 3 on fallbacks or a failed ordering check",
    )
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
