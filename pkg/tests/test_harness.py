import csv
import json

import pytest

from hybrid_falsify.falsifier import FalsifierConfig
from hybrid_falsify.harness import (
    BOUNDED, UNBOUNDED, ExperimentSpec, aggregate, load_reports, merge, run_experiment,
)
from hybrid_falsify.navigation import build_toy


def test_spec_validation():
    prob = build_toy("overlap")
    with pytest.raises(ValueError):
        ExperimentSpec(problem=prob, seeds=())
    with pytest.raises(ValueError):
        ExperimentSpec(problem=prob, seeds=(1, 1))
    with pytest.raises(ValueError):
        ExperimentSpec(problem=prob, method=BOUNDED)
    with pytest.raises(ValueError):
        ExperimentSpec(problem=prob, method="sideways")
    assert ExperimentSpec(problem=prob, method=BOUNDED, horizon=10).label == "bounded T=10"


def test_trivial_toy_all_seeds_succeed(tmp_path):
    spec = ExperimentSpec(problem=build_toy("overlap"), seeds=tuple(range(1, 11)),
                          config=FalsifierConfig(max_points=20), output=tmp_path)
    table = run_experiment(spec)
    row = table.rows[0]
    assert row.successes == 10 and row.runs == 10
    assert all(r["verified"] for r in table.reports[UNBOUNDED])
    assert (tmp_path / "table.csv").exists() and (tmp_path / "table.txt").exists()


def test_table_recomputable_from_archive(tmp_path):
    spec = ExperimentSpec(problem=build_toy("corridor"), seeds=(1, 2, 3, 4), method=BOUNDED, horizon=5.0,
                          config=FalsifierConfig(max_points=5), output=tmp_path / "b")
    short = run_experiment(spec)
    spec2 = ExperimentSpec(problem=build_toy("corridor"), seeds=(1, 2, 3, 4),
                           config=FalsifierConfig(max_points=10, seed_boundaries=False), output=tmp_path / "u")
    long_ = run_experiment(spec2)
    for table, out, label in ((short, tmp_path / "b", "bounded T=5"), (long_, tmp_path / "u", UNBOUNDED)):
        again = aggregate(label, load_reports(out, label))
        assert again == table.rows[0]
        with open(out / "table.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert int(rows[0]["successes"]) == table.rows[0].successes
    assert short.rows[0].successes == 0 and short.rows[0].avg_sim_time is None
    both = merge(short, long_)
    assert [r.label for r in both.rows] == ["bounded T=5", UNBOUNDED]
    assert "successful falsification" in both.format()


def test_average_over_successes_only():
    reports = [
        {"outcome": "falsified", "seed": 1, "simulated_time": 10.0},
        {"outcome": "budget_exhausted", "seed": 2, "simulated_time": 1000.0},
        {"outcome": "falsified", "seed": 3, "simulated_time": 30.0},
    ]
    row = aggregate("m", reports)
    assert row.successes == 2 and row.avg_sim_time == pytest.approx(20.0) and row.seeds_ok == [1, 3]


def test_rerun_reproduces_table(tmp_path):
    def once(out):
        spec = ExperimentSpec(problem=build_toy("two_mode_line"), seeds=(1, 2, 3),
                              config=FalsifierConfig(max_points=20, seed_boundaries=False), output=out)
        return run_experiment(spec)

    a, b = once(tmp_path / "a"), once(tmp_path / "b")
    assert a.rows == b.rows
    assert (tmp_path / "a" / "table.csv").read_text() == (tmp_path / "b" / "table.csv").read_text()


def test_parallel_matches_serial():
    base = dict(problem=build_toy("two_mode_line"), seeds=(1, 2, 3, 4),
                config=FalsifierConfig(max_points=20, seed_boundaries=False))
    serial = run_experiment(ExperimentSpec(**base))
    parallel = run_experiment(ExperimentSpec(workers=2, **base))
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]
    assert strip(serial.reports[UNBOUNDED]) == strip(parallel.reports[UNBOUNDED])


def test_per_run_json_is_valid(tmp_path):
    spec = ExperimentSpec(problem=build_toy("overlap"), seeds=(5,), config=FalsifierConfig(max_points=5),
                          output=tmp_path)
    run_experiment(spec)
    data = json.loads((tmp_path / "unbounded_seed5.json").read_text())
    assert data["seed"] == 5 and data["outcome"] == "falsified"
