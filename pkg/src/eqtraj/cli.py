"""Command-line interface: ``eqtraj {gen,train,eval,conformal}``.

Exit codes: 0 success, 1 usage error, 2 numeric or feasibility failure.
Any flag can also come from a JSON file given by ``--config``; explicit
flags win.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import conformal, scenes as sc
from .experiments import cv_point_forecaster, forecast, model_point_forecaster, rotate_batch
from .metrics import COLUMNS, MetricReport, evaluate
from .model import ModelConfig, ModelParams, TrainConfig, TrainingDiverged, constant_velocity_baseline, train

log = logging.getLogger("eqtraj")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class CliFailure(Exception):
    """Numeric or feasibility failure, reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def _usage_exit(exc: SystemExit) -> int:
    if exc.code in (None, 0):
        return EXIT_OK
    if isinstance(exc.code, str):
        print(exc.code, file=sys.stderr)
    return EXIT_USAGE


def _widths(text: str) -> tuple[int, ...]:
    try:
        w = tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid widths '{text}'") from None
    if not w or min(w) < 1:
        raise argparse.ArgumentTypeError("widths must be positive integers")
    return w


def _alpha(text) -> float:
    a = float(text)
    if not 0 < a < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return v
    return parse


def _nonneg_int(text) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eqtraj", description="Equivariant probabilistic trajectory forecasting")
    p.add_argument("--config", help="JSON file supplying default flag values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=_nonneg_int, default=100)
    g.add_argument("--agents", type=_positive(int), default=3)
    g.add_argument("--env-points", type=_nonneg_int, default=3)
    g.add_argument("--sigma", type=float, default=0.02)
    g.add_argument("--history", "-t", type=int, default=6)
    g.add_argument("--horizon", "-k", type=int, default=9)
    g.add_argument("--dt", type=_positive(float), default=0.2)
    g.add_argument("--heading-band", type=float, default=180.0,
                   help="initial headings lie within +/- this many degrees of the x axis")
    g.add_argument("--weights", default="1,1,1,1",
                   help="behaviour mix: constant velocity, turn, lane change, stop")

    t = sub.add_parser("train", help="train a forecaster")
    t.add_argument("--scenes", required=True)
    t.add_argument("--out", required=True, help="model JSON path")
    t.add_argument("--loss-log", help="loss CSV path (default: <out>.loss.csv)")
    t.add_argument("--history", "-t", type=int, default=6)
    t.add_argument("--horizon", "-k", type=int, default=9)
    t.add_argument("--n-theta", type=int, default=16)
    t.add_argument("--n-r", type=_positive(int), default=4)
    t.add_argument("--radius", type=_positive(float), default=8.0)
    t.add_argument("--widths", type=_widths, default=(8, 8))
    t.add_argument("--variant", choices=("equivariant", "ablation"), default="equivariant")
    t.add_argument("--loss", choices=("nll", "mrs"), default="nll")
    t.add_argument("--alpha", type=_alpha, default=0.1)
    t.add_argument("--iterations", type=_nonneg_int, default=300)
    t.add_argument("--lr", type=_positive(float), default=0.03)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--clip", type=_positive(float), default=1.0)
    t.add_argument("--batch-size", type=_positive(int))
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a model or the constant-velocity baseline")
    e.add_argument("--scenes", required=True)
    e.add_argument("--model", help="model JSON; omit to evaluate the constant-velocity baseline")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--json", help="also write the metrics as JSON")
    e.add_argument("--history", "-t", type=int, help="baseline history (default: scene length - horizon)")
    e.add_argument("--horizon", "-k", type=int, help="baseline horizon (default 9)")
    e.add_argument("--cv-sigma", type=_positive(float), default=0.5)
    e.add_argument("--rotate-test", type=float, default=0.0, help="rotate test scenes by this many degrees")
    e.add_argument("--alpha", type=_alpha, default=0.1)
    e.add_argument("--samples", type=_positive(int), default=6)
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("conformal", help="calibrate conformal regions and report coverage")
    c.add_argument("--cal", required=True, help="calibration scenes")
    c.add_argument("--test", required=True, help="test scenes")
    c.add_argument("--model", help="model JSON; omit to use the constant-velocity forecaster")
    c.add_argument("--out", required=True, help="calibration JSON path")
    c.add_argument("--report", help="coverage report JSON path")
    c.add_argument("--history", "-t", type=int)
    c.add_argument("--horizon", "-k", type=int)
    c.add_argument("--alpha", type=_alpha, default=0.1)
    c.add_argument("--correction", choices=conformal.CORRECTIONS, default="bonferroni")
    return p


# ---------------------------------------------------------------- helpers

def _load_scenes(path) -> list[sc.Scene]:
    try:
        return sc.load(path)
    except FileNotFoundError:
        raise CliFailure(f"scene file not found: {path}") from None
    except OSError as exc:
        raise CliFailure(f"cannot read {path}: {exc}") from None


def _load_model(path) -> ModelParams:
    try:
        return ModelParams.load(path)
    except FileNotFoundError:
        raise CliFailure(f"model file not found: {path}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise CliFailure(f"cannot read model {path}: {exc}") from None


def _batch(scenes, history: int, horizon: int, dt: float | None = None) -> sc.SceneBatch:
    if not scenes:
        raise CliFailure("scene file is empty")
    need = history + horizon
    for s in scenes:
        if s.n_steps != need:
            raise CliFailure(f"horizon mismatch: scene {s.id} has {s.n_steps} steps, "
                             f"expected history {history} + horizon {horizon} = {need}")
        if dt is not None and not math.isclose(s.dt, dt, rel_tol=1e-9):
            raise CliFailure(f"scene {s.id} has dt {s.dt}, model expects {dt}")
    try:
        return sc.to_batch(scenes, history, horizon)
    except ValueError as exc:
        raise CliFailure(str(exc)) from None


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CliFailure(f"cannot write {path}: {exc}") from None


def _baseline_shape(scenes, history, horizon) -> tuple[int, int]:
    horizon = 9 if horizon is None else horizon
    if history is None:
        history = scenes[0].n_steps - horizon if scenes else 2
    return history, horizon


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    try:
        weights = tuple(float(x) for x in args.weights.split(","))
        band = math.radians(args.heading_band)
        cfg = sc.GenConfig(seed=args.seed, n_scenes=args.scenes, n_agents=args.agents, n_env=args.env_points,
                           weights=weights, sigma=args.sigma, history=args.history, horizon=args.horizon,
                           dt=args.dt, heading_range=(-band, band))
    except ValueError as exc:
        raise SystemExit(f"eqtraj gen: error: {exc}") from None
    if cfg.n_scenes == 0:
        log.warning("generating zero scenes; writing an empty file")
    try:
        n = sc.save(sc.generate(cfg), args.out)
    except OSError as exc:
        raise CliFailure(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = _load_scenes(args.scenes)
    dt = scenes[0].dt if scenes else 0.2
    try:
        config = ModelConfig(history=args.history, horizon=args.horizon, dt=dt, n_theta=args.n_theta,
                             n_r=args.n_r, radius=args.radius, widths=args.widths, variant=args.variant)
    except ValueError as exc:
        raise SystemExit(f"eqtraj train: error: {exc}") from None
    batch = _batch(scenes, config.history, config.horizon, dt)
    tcfg = TrainConfig(loss=args.loss, alpha=args.alpha, iterations=args.iterations, lr=args.lr,
                       momentum=args.momentum, clip=args.clip, batch_size=args.batch_size, seed=args.seed)
    log_path = args.loss_log or f"{args.out}.loss.csv"
    print(f"# train variant={config.variant} loss={tcfg.loss} alpha={tcfg.alpha} "
          f"iterations={tcfg.iterations} lr={tcfg.lr} seed={tcfg.seed} scenes={len(batch)}")
    params = ModelParams.init(config, seed=args.seed)
    failure = None
    try:
        params, history = train(params, batch, tcfg)
    except TrainingDiverged as exc:
        params, history, failure = exc.params, exc.history, str(exc)
    rows = "".join(f"{i},{v!r}\n" for i, v in enumerate(history))
    _write_text(log_path, "iteration,loss\n" + rows)
    _write_text(args.out, params.to_json())
    if failure:
        raise CliFailure(f"training diverged ({failure}); last good parameters saved to {args.out}")
    if history:
        print(f"loss {history[0]:.6f} -> {history[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args, forecaster: Callable | None = None) -> int:
    """Evaluate and write one metrics row.

    ``forecaster`` replaces the model: a callable ``(history, env) ->
    (means, covs)`` used by tests to inject an oracle.
    """
    scenes = _load_scenes(args.scenes)
    if args.model:
        params = _load_model(args.model)
        history, horizon = params.config.history, params.config.horizon
        if args.horizon is not None and args.horizon != horizon:
            raise CliFailure(f"horizon mismatch: model predicts {horizon} steps, --horizon is {args.horizon}")
        batch = _batch(scenes, history, horizon, params.config.dt)
    else:
        params = None
        history, horizon = _baseline_shape(scenes, args.history, args.horizon)
        batch = _batch(scenes, history, horizon)
    if args.rotate_test:
        batch = rotate_batch(batch, np.full(len(batch), math.radians(args.rotate_test)))
    if forecaster is not None:
        means, covs = forecaster(batch.history, batch.env)
    elif params is not None:
        fc = forecast(params, batch)
        means, covs = fc.means, fc.covs
    else:
        fc = constant_velocity_baseline(batch.history, horizon, scenes[0].dt, args.cv_sigma)
        means, covs = fc.means, fc.covs
    try:
        report = evaluate(means, covs, batch.future, args.alpha, args.samples, args.seed)
    except (ValueError, FloatingPointError) as exc:
        raise CliFailure(f"evaluation failed: {exc}") from None
    _write_text(args.out, MetricReport.csv_header() + report.csv_row())
    if args.json:
        _write_text(args.json, report.to_json())
    print(",".join(f"{c}={getattr(report, c):.6g}" for c in COLUMNS))
    return EXIT_OK


def cmd_conformal(args) -> int:
    cal_scenes, test_scenes = _load_scenes(args.cal), _load_scenes(args.test)
    if args.model:
        params = _load_model(args.model)
        history, horizon = params.config.history, params.config.horizon
        f = model_point_forecaster(params)
    else:
        history, horizon = _baseline_shape(cal_scenes, args.history, args.horizon)
        dt = cal_scenes[0].dt if cal_scenes else 0.2
        f = cv_point_forecaster(horizon, dt)
    cal_b, test_b = _batch(cal_scenes, history, horizon), _batch(test_scenes, history, horizon)
    try:
        cal = conformal.calibrate(f, cal_b, args.alpha, args.correction)
    except conformal.InfeasibleQuantile as exc:
        raise CliFailure(str(exc)) from None
    _write_text(args.out, cal.to_json())
    joint = conformal.joint_coverage(cal, f, test_b)
    marginal = conformal.marginal_coverage(cal, f, test_b)
    report = {"alpha": cal.alpha, "correction": cal.correction, "alpha_step": cal.alpha_step,
              "n_cal": len(cal_b), "n_test": len(test_b), "joint": joint, "marginal": marginal.tolist()}
    if args.report:
        _write_text(args.report, json.dumps(report))
    print(f"joint coverage {joint:.4f} (target {1 - args.alpha:.2f}); "
          f"marginal min {marginal.min():.4f} over {cal.horizon} steps")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "conformal": cmd_conformal}


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        defaults = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"eqtraj: error: cannot read config {known.config}: {exc}") from None
    if not isinstance(defaults, dict):
        raise SystemExit("eqtraj: error: config file must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
    if "widths" in defaults and not isinstance(defaults["widths"], str):
        defaults["widths"] = tuple(defaults["widths"])
    for action in parser._subparsers._group_actions:          # one subparsers action
        for sub in action.choices.values():
            known_dests = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in defaults.items() if k in known_dests})
            for a in sub._actions:
                if a.dest in defaults:
                    a.required = False


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return _usage_exit(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return _usage_exit(exc)
    except (CliFailure, sc.SceneFormatError, FloatingPointError) as exc:
        print(f"eqtraj {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
