"""Multi-seed experiments comparing the unbounded method with the bounded baseline.

One falsifier run per seed; each run is archived as JSON and the rows of the
summary table (success count, average simulated time over successful runs
only) are written as CSV and as formatted text.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .falsifier import FalsifierConfig, RunReport, run, run_bounded_baseline, verify_error_trajectory
from .model import Problem

log = logging.getLogger(__name__)

UNBOUNDED = "unbounded"
BOUNDED = "bounded"


@dataclass(frozen=True)
class ExperimentSpec:
    problem: Problem
    method: str = UNBOUNDED
    seeds: tuple = tuple(range(1, 101))
    horizon: float | None = None
    config: FalsifierConfig = FalsifierConfig()
    output: Path | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seed list has duplicates")
        if self.method not in (UNBOUNDED, BOUNDED):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == BOUNDED and not (self.horizon is not None and self.horizon > 0):
            raise ValueError("the bounded method needs a positive horizon")

    @property
    def label(self) -> str:
        return UNBOUNDED if self.method == UNBOUNDED else f"bounded T={self.horizon:g}"


@dataclass
class ExperimentRow:
    label: str
    runs: int
    successes: int
    avg_sim_time: float | None
    seeds_ok: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentTable:
    rows: list[ExperimentRow]
    reports: dict[str, list[dict]] = field(default_factory=dict, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "runs", "successes", "avg_sim_time"])
            for r in self.rows:
                w.writerow([r.label, r.runs, r.successes, "" if r.avg_sim_time is None else f"{r.avg_sim_time:.6g}"])

    def format(self) -> str:
        head = f"{'method':<16} {'successful falsification':>26} {'average total simulation time':>31}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            t = "-" if r.avg_sim_time is None else f"{r.avg_sim_time:.1f}"
            lines.append(f"{r.label:<16} {f'{r.successes}/{r.runs}':>26} {t:>31}")
        return "\n".join(lines)


def aggregate(label: str, reports: list[dict]) -> ExperimentRow:
    """Table row from per-run report dictionaries; times averaged over successes only."""
    ok = [r for r in reports if r["outcome"] == "falsified"]
    avg = float(np.mean([r["simulated_time"] for r in ok])) if ok else None
    return ExperimentRow(label=label, runs=len(reports), successes=len(ok), avg_sim_time=avg,
                         seeds_ok=sorted(r["seed"] for r in ok))


def run_one(spec: ExperimentSpec, seed: int) -> dict:
    """One seed; exceptions count as an unsuccessful run."""
    cfg = dataclasses.replace(spec.config, seed=seed)
    try:
        if spec.method == UNBOUNDED:
            rep: RunReport = run(spec.problem, cfg)
        else:
            rep = run_bounded_baseline(spec.problem, cfg, spec.horizon)
    except Exception as exc:  # noqa: BLE001 - a crashing seed is a failed seed
        log.warning("seed %d failed with %r", seed, exc)
        return {"outcome": "error", "seed": seed, "simulated_time": 0.0, "error": repr(exc)}
    out = rep.to_dict()
    out["method"] = spec.label
    if rep.falsified:
        out["verified"] = verify_error_trajectory(spec.problem, rep, cfg.epsilon, cfg.step)
    return out


def _run_seed(args):
    return run_one(*args)


def run_experiment(spec: ExperimentSpec) -> ExperimentTable:
    """Run every seed of ``spec``, archive the reports and build the table."""
    jobs = [(spec, s) for s in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            reports = list(pool.map(_run_seed, jobs))
    else:
        reports = [_run_seed(j) for j in jobs]
    table = ExperimentTable(rows=[aggregate(spec.label, reports)], reports={spec.label: reports})
    if spec.output is not None:
        write_outputs(table, Path(spec.output))
    return table


def write_outputs(table: ExperimentTable, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for label, reports in table.reports.items():
        tag = label.replace(" ", "_").replace("=", "")
        for r in reports:
            (out / f"{tag}_seed{r['seed']}.json").write_text(json.dumps(r, indent=1) + "\n")
    table.to_csv(out / "table.csv")
    (out / "table.txt").write_text(table.format() + "\n")


def load_reports(out, label: str) -> list[dict]:
    tag = label.replace(" ", "_").replace("=", "")
    return [json.loads(p.read_text()) for p in sorted(Path(out).glob(f"{tag}_seed*.json"))]


def merge(*tables: ExperimentTable) -> ExperimentTable:
    rows, reports = [], {}
    for t in tables:
        rows += t.rows
        reports.update(t.reports)
    return ExperimentTable(rows=rows, reports=reports)
