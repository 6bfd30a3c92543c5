"""Command-line interface: ``gpff <command> --config FILE [options]``.

Commands
--------
simulate   one closed-loop trial at ``--position`` with ``ilc.theta0`` (or zero)
ilc        one ILC session at ``--position``; writes the per-trial history
collect    ILC at every training position; writes training.csv
fit        one GP per feedforward parameter; writes model and grid files
predict    GP predictions at the test positions
evaluate   compare center / gp / local_ilc at the test positions

The ``collect``, ``fit`` and ``evaluate`` stages are cached in the output
directory, keyed by a hash of the config content they depend on.
``--stage S`` recomputes stage ``S`` and every later stage regardless.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 stability failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import build_run_config, content_hash, load_config, parse_position
from .errors import (
    BasisError,
    ConfigError,
    DomainError,
    GpffError,
    StabilityError,
    TrajectoryError,
)
from .framework import (
    METHODS,
    SCHEMA_VERSION,
    TrainingData,
    center_parameters,
    collect_training_data,
    evaluate_methods,
    fit_models,
    local_parameters,
    predict_parameters,
)
from .gp import GpModel, save_grid_csv
from .ilcbf import IlcSession
from .plant import simulate_closed_loop

logger = logging.getLogger("gpff")

STAGES = ("collect", "fit", "evaluate")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STABILITY = 0, 2, 3, 4


# -- cache bookkeeping ----------------------------------------------------------


class Cache:
    """``cache.json`` in the output directory maps stage name to input hash."""

    def __init__(self, run):
        self.run = run
        self.path = run.out_dir / "cache.json"
        try:
            self.entries = json.loads(self.path.read_text())
        except (FileNotFoundError, json.JSONDecodeError):
            self.entries = {}

    def forced(self, stage):
        f = self.run.force_from
        return f is not None and STAGES.index(stage) >= STAGES.index(f)

    def valid(self, key, digest, *files):
        if self.forced(key.split(":")[0]):
            return False
        return self.entries.get(key) == digest and all((self.run.out_dir / f).exists() for f in files)

    def store(self, key, digest):
        self.entries[key] = digest
        self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True) + "\n")


def _hashes(run):
    c = run.cfg
    dynamics = [SCHEMA_VERSION, c["plant"], c["controller"], c["trajectory"], c["ilc"], c["seed"]]
    h_collect = content_hash(dynamics, run.plan.training_positions.tolist())
    h_fit = content_hash(h_collect, c["gp"], c["positions"]["grid_points"])
    h_center = content_hash(dynamics, run.plan.center.tolist())
    h_local = content_hash(dynamics, run.plan.test_positions.tolist())
    return h_collect, h_fit, h_center, h_local


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# -- stages ---------------------------------------------------------------------


def stage_collect(run, cache) -> TrainingData:
    h, *_ = _hashes(run)
    out = run.out_dir
    if cache.valid("collect", h, "training.csv", "training_sessions.json"):
        logger.info("collect: cached (%s)", h)
        summaries = json.loads((out / "training_sessions.json").read_text())["sessions"]
        return TrainingData(TrainingData.sets_from_csv(out / "training.csv"), summaries)
    logger.info("collect: %d ILC sessions", len(run.plan.training_positions))
    data = collect_training_data(run.plan)
    data.save_csv(out / "training.csv")
    _write_json(
        out / "training_sessions.json",
        {"schema_version": SCHEMA_VERSION, "parameters": run.plan.parameter_names, "sessions": data.summaries},
    )
    cache.store("collect", h)
    return data


def _grid_positions(run):
    p = run.plant
    axes = [np.linspace(lo, hi, run.grid_points) for lo, hi in zip(p.lower, p.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def stage_fit(run, cache, data=None) -> dict:
    _, h, *_ = _hashes(run)
    out = run.out_dir
    names = run.plan.parameter_names
    files = [f"model_{n}.json" for n in names] + [f"grid_{n}.csv" for n in names]
    if cache.valid("fit", h, *files) and cache.entries.get("collect") == _hashes(run)[0]:
        logger.info("fit: cached (%s)", h)
        return {n: GpModel.load(out / f"model_{n}.json") for n in names}
    if data is None:
        data = stage_collect(run, cache)
    logger.info("fit: %d GP models", len(names))
    models = fit_models(run.plan, data)
    grid = _grid_positions(run)
    mean, var = predict_parameters(models, grid)
    for k, (name, model) in enumerate(models.items()):
        model.save(out / f"model_{name}.json")
        save_grid_csv(out / f"grid_{name}.csv", grid, mean[:, k], var[:, k])
    cache.store("fit", h)
    return models


def _cached_thetas(run, cache, key, digest, compute):
    path = run.out_dir / "evaluation_sessions.json"
    try:
        stored = json.loads(path.read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        stored = {}
    if cache.valid(f"evaluate:{key}", digest) and key in stored:
        logger.info("evaluate: %s sessions cached (%s)", key, digest)
        return np.asarray(stored[key], dtype=float)
    value = np.asarray(compute(), dtype=float)
    stored[key] = value.tolist()
    stored["schema_version"] = SCHEMA_VERSION
    _write_json(path, stored)
    cache.store(f"evaluate:{key}", digest)
    return value


def stage_evaluate(run, cache):
    plan = run.plan
    data = stage_collect(run, cache)
    models = stage_fit(run, cache, data) if "gp" in run.methods else None
    _, _, h_center, h_local = _hashes(run)
    center = local = None
    if "center" in run.methods:
        center = _cached_thetas(run, cache, "center", h_center, lambda: center_parameters(plan))
    if "local_ilc" in run.methods:
        logger.info("evaluate: local ILC at %d test positions", len(plan.test_positions))
        local = _cached_thetas(
            run,
            cache,
            "local_ilc",
            h_local,
            lambda: plan._map(lambda ip: local_parameters(plan, *ip), enumerate(plan.test_positions)),
        )
    report = evaluate_methods(plan, models, run.methods, data, local, center)
    report.save_json(run.out_dir / "report.json")
    report.save_summary_csv(run.out_dir / "summary.csv")
    report.save_timeseries_csv(run.out_dir / "timeseries.csv", plan.reference.sample_time)
    return report


# -- commands -------------------------------------------------------------------


def _position(run, text):
    if text is None:
        return run.plan.center
    return run.plant.check_position(parse_position(text, run.plant.dim))


def _fmt_pos(p):
    return ",".join(f"{v:g}" for v in p)


def cmd_simulate(run, args):
    plan = run.plan
    rho = _position(run, args.position)
    theta = np.zeros(plan.basis_matrix.n_theta) if run.theta0 is None else run.theta0
    f = plan.basis_matrix.feedforward(theta)
    r = plan.reference.samples
    res = simulate_closed_loop(plan.plant, rho, plan.controllers, r, f, None, (plan.seed, 5, 0))
    n_ax = r.shape[1]
    with open(run.out_dir / "simulate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"{s}{i}" for s in ("r", "f", "y", "e", "u") for i in range(n_ax)])
        for k in range(r.shape[0]):
            vals = [r[k], f[k], res.y[k], res.e[k], res.u[k]]
            w.writerow([k, repr(k * plan.reference.sample_time)] + [repr(float(v)) for a in vals for v in a])
    print(f"position {_fmt_pos(rho)}  |e|_2 = {np.linalg.norm(res.e):.6e}  max|e| = {np.abs(res.e).max():.6e}")
    return EXIT_OK


def cmd_ilc(run, args):
    plan = run.plan
    rho = _position(run, args.position)
    session = IlcSession(
        plan.plant, rho, plan.controllers, plan.reference, plan.basis_matrix, plan.law(rho), run.theta0, (plan.seed, 4, 0)
    ).run(plan.trials)
    session.to_csv(run.out_dir / "ilc_session.csv")
    session.to_json(run.out_dir / "ilc_session.json")
    last = session.history[-1]
    print(f"position {_fmt_pos(rho)}  trials {plan.trials}  final |e|_2 = {last.error_norm:.6e}")
    for name, value in zip(plan.parameter_names, last.theta):
        print(f"  {name:>12s} = {value:.8g}")
    return EXIT_OK


def cmd_collect(run, args):
    data = stage_collect(run, Cache(run))
    names = run.plan.parameter_names
    print("position".ljust(16) + "".join(n.rjust(16) for n in names))
    for s in data.summaries:
        print(_fmt_pos(s["position"]).ljust(16) + "".join(f"{v:16.8g}" for v in s["observation"]))
    return EXIT_OK


def cmd_fit(run, args):
    models = stage_fit(run, Cache(run))
    for name, m in models.items():
        ls = ",".join(f"{v:.4g}" for v in m.kernel.lengthscales)
        print(
            f"{name}: sf2={m.kernel.signal_variance:.4g} l=[{ls}] sn2={m.noise_variance:.4g} "
            f"lml={m.fit_info.get('log_marginal_likelihood')}"
        )
    return EXIT_OK


def cmd_predict(run, args):
    models = stage_fit(run, Cache(run))
    pts = run.plan.test_positions if args.position is None else _position(run, args.position)[None, :]
    mean, var = predict_parameters(models, pts)
    names = list(models)
    with open(run.out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"rho_{i}" for i in range(pts.shape[1])] + [f"{n}_{s}" for n in names for s in ("mean", "variance")])
        for p, m, v in zip(pts, mean, var):
            w.writerow([repr(float(x)) for x in p] + [repr(float(x)) for pair in zip(m, v) for x in pair])
    print("position".ljust(16) + "".join(n.rjust(26) for n in names))
    for p, m, v in zip(pts, mean, var):
        print(_fmt_pos(p).ljust(16) + "".join(f"{a:14.8g} +-{2 * np.sqrt(b):9.3g}" for a, b in zip(m, v)))
    return EXIT_OK


def cmd_evaluate(run, args):
    report = stage_evaluate(run, Cache(run))
    table = report.table()
    print("error 2-norm per test position")
    print("position".ljust(16) + "".join(m.rjust(14) for m in report.methods))
    for p, row in zip(run.plan.test_positions, table):
        print(_fmt_pos(p).ljust(16) + "".join(f"{v:14.6e}" for v in row))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "ilc": cmd_ilc,
    "collect": cmd_collect,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gpff", description="Position-dependent feedforward via ILC and GP regression.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip() or None)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out-dir", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides seed)")
        p.add_argument("--position", help="comma-separated position, e.g. 0.5 or 0.2,0.7")
        p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
        p.add_argument("--stage", choices=STAGES, help="recompute this stage and later ones even if cached")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _setup_logging(verbosity):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        methods = None if args.methods is None else [m.strip() for m in args.methods.split(",") if m.strip()]
        run = build_run_config(cfg, args.out_dir, args.seed, methods, args.stage)
        _setup_logging(run.verbosity + args.verbose)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](run, args)
    except (ConfigError, DomainError, BasisError, TrajectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StabilityError as exc:
        print(f"stability failure: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except GpffError as exc:
        diag = getattr(exc, "condition_estimate", None)
        extra = f" (condition estimate {diag:.3g})" if diag is not None else ""
        print(f"numerical failure: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
