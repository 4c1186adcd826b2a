"""Command-line entry points ``falsify`` and ``falsify-bench``.

``<model>`` is either a JSON model file (see ``docs/model_format.md``) or the
name of a built-in instance: ``navigation`` or one of the toy systems.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .falsifier import VARIANTS, FalsifierConfig, run, run_bounded_baseline, verify_error_trajectory
from .harness import BOUNDED, UNBOUNDED, ExperimentSpec, run_experiment
from .model import Problem, dump_problem, load_problem
from .navigation import TOY_KINDS, build_navigation, build_toy
from .simulate import SimConfig, flow, write_event_log, write_trajectory_csv

EXIT_FALSIFIED = 0
EXIT_EXHAUSTED = 2
EXIT_USAGE = 1

# Navigation runs sample velocities in [-1, 1]; positions span the whole grid
NAV_SAMPLE_LOWER = (-1e9, -1e9, -1.0, -1.0)
NAV_SAMPLE_UPPER = (1e9, 1e9, 1.0, 1.0)


def load_model(name: str) -> Problem:
    if name == "navigation":
        return build_navigation()
    if name in TOY_KINDS:
        return build_toy(name)
    path = Path(name)
    if not path.exists():
        raise FileNotFoundError(f"no model file or built-in instance named {name!r}")
    return load_problem(path)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("model", help="model JSON file, 'navigation' or a toy name")
    p.add_argument("--max-points", type=int, default=500, help="random states added (default 500)")
    p.add_argument("--epsilon", type=float, default=1e-3, help="gap-sum acceptance threshold")
    p.add_argument("--omega", type=float, default=500.0, help="gap weight")
    p.add_argument("--variant", choices=VARIANTS, default="two_sided")
    p.add_argument("--t-fwd", type=float, default=0.5, help="forward simulation length")
    p.add_argument("--t-bwd", type=float, default=0.5, help="backward simulation length")
    p.add_argument("--step", type=float, default=1e-2, help="integration step")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args, problem_name: str) -> FalsifierConfig:
    cfg = FalsifierConfig(max_points=args.max_points, epsilon=args.epsilon, omega=args.omega,
                          variant=args.variant, t_fwd=args.t_fwd, t_bwd=args.t_bwd, step=args.step)
    if problem_name == "navigation":
        cfg = dataclasses.replace(cfg, sample_lower=NAV_SAMPLE_LOWER, sample_upper=NAV_SAMPLE_UPPER)
    return cfg


def falsify_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="falsify", description="Search for an error trajectory.")
    _add_common(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--bounded", type=float, metavar="T", help="run the bounded baseline with horizon T")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for the result files")
    p.add_argument("--emit-model", type=Path, metavar="FILE", help="write the model as JSON and exit")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        problem = load_model(args.model)
    except (OSError, ValueError) as exc:
        print(f"falsify: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.emit_model is not None:
        dump_problem(problem, args.emit_model)
        return 0
    cfg = dataclasses.replace(_config(args, args.model), seed=args.seed)
    if args.bounded is not None:
        report = run_bounded_baseline(problem, cfg, args.bounded)
    else:
        report = run(problem, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary = report.to_dict()
    if report.falsified:
        summary["verified"] = verify_error_trajectory(problem, report, cfg.epsilon, cfg.step)
        tr = report.trajectory
        dense = flow(problem.system, tr.start, tr.duration, SimConfig(step=cfg.step))
        write_trajectory_csv(dense, out / "trajectory.csv")
        write_event_log(dense, out / "events.json")
    (out / "report.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{report.outcome}: {report.iterations} iterations, {report.local_searches} local searches, "
          f"simulated time {report.simulated_time:.1f}")
    if report.falsified:
        print(f"initial state {report.initial_state}, duration {report.trajectory.duration:.6g}")
        return EXIT_FALSIFIED
    return EXIT_EXHAUSTED


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1..100"`` or a comma list such as ``"1,3,5"``."""
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    try:
        return tuple(int(s) for s in text.split(",") if s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def bench_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="falsify-bench", description="Run one method over many seeds.")
    _add_common(p)
    p.add_argument("--method", choices=(UNBOUNDED, BOUNDED), default=UNBOUNDED)
    p.add_argument("--horizon", type=float, help="horizon T of the bounded method")
    p.add_argument("--seeds", type=parse_seeds, default=tuple(range(1, 101)), help="e.g. 1..100")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        problem = load_model(args.model)
        spec = ExperimentSpec(problem=problem, method=args.method, seeds=args.seeds, horizon=args.horizon,
                              config=_config(args, args.model), output=args.out, workers=args.workers)
    except (OSError, ValueError) as exc:
        print(f"falsify-bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    table = run_experiment(spec)
    print(table.format())
    return 0
