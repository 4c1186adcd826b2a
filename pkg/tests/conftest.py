import numpy as np
import pytest

from hybrid_falsify.cost import INF, euclid
from hybrid_falsify.model import Ellipsoid, GuardSurface, HybridSystem, Mode, Problem, State
from hybrid_falsify.path_graph import ExplorationStore
from hybrid_falsify.simulate import SimConfig, flow, flow_backward


def strip_problem() -> Problem:
    """Three 2-D cells in a row with constant drift to the right.

    Small enough that random stores stay cheap, rich enough to have
    cross-mode relation edges and infinite distances.
    """
    modes = {}
    names = ["L", "M", "R"]
    for k, name in enumerate(names):
        guards = ()
        if k < 2:
            guards = (GuardSurface([1.0, 0.0], -(k + 1.0), names[k + 1], np.eye(2), np.zeros(2)),)
        modes[name] = Mode(name, np.zeros((2, 2)), [1.0, 0.2], [k, 0.0], [k + 1.0, 1.0], guards)
    sys = HybridSystem(modes, 2)
    ball = np.eye(2) / 0.15 ** 2
    return Problem(sys, Ellipsoid(State("L", [0.3, 0.3]), ball), Ellipsoid(State("R", [2.6, 0.7]), ball))


def random_store(rng, max_points=8, problem=None) -> ExplorationStore:
    """Random points plus genuinely simulated edges, at most ``max_points`` points."""
    problem = problem or strip_problem()
    sys = problem.system
    store = ExplorationStore(problem)
    cfg = SimConfig(record_samples=False)
    names = sys.mode_names
    while len(store) < max_points:
        name = names[rng.integers(len(names))]
        mode = sys[name]
        i = store.add_point(State(name, rng.uniform(mode.lower, mode.upper)))
        if len(store) < max_points and rng.random() < 0.7:
            if rng.random() < 0.6:
                seg = flow(sys, store.points[i], rng.uniform(0.1, 1.5), cfg)
                if seg.ok and seg.duration > 0:
                    store.add_edge(i, store.add_point(seg.end), seg)
            else:
                seg = flow_backward(sys, store.points[i], rng.uniform(0.1, 1.0), cfg)
                if seg.ok and seg.duration > 0:
                    store.add_edge(store.add_point(seg.start), i, seg)
        if rng.random() < 0.15:
            break
    return store


def brute_force_min_cost(store, omega):
    """Cheapest simple path by exhaustive enumeration, same summation order as the search."""
    n = len(store)
    best = INF

    def weight(a, b):
        if store.related(a, b):
            return 0.0
        pa, pb = store.points[a], store.points[b]
        if pa.mode != pb.mode:
            return INF
        return omega * euclid(pa.x, pb.x)

    def visit(path, cost):
        nonlocal best
        last = path[-1]
        best = min(best, cost + store.d_unsafe[last])
        for u in range(n):
            if u in path:
                continue
            w = weight(last, u)
            if w < INF:
                visit(path + [u], cost + w)

    for i in range(n):
        if store.d_init[i] < INF:
            visit([i], store.d_init[i])
    return best


@pytest.fixture
def strip():
    return strip_problem()


def chain_store(rng, max_points=9, problem=None) -> ExplorationStore:
    """Random points extended by forward chains of one to three simulated hops."""
    problem = problem or strip_problem()
    sys = problem.system
    store = ExplorationStore(problem)
    cfg = SimConfig(record_samples=False)
    names = sys.mode_names
    while len(store) < max_points:
        name = names[rng.integers(len(names))]
        mode = sys[name]
        i = store.add_point(State(name, rng.uniform(mode.lower, mode.upper)))
        for _ in range(int(rng.integers(0, 4))):
            if len(store) >= max_points:
                break
            seg = flow(sys, store.points[i], rng.uniform(0.1, 0.8), cfg)
            if not (seg.ok and seg.duration > 0):
                break
            j = store.add_point(seg.end)
            store.add_edge(i, j, seg)
            i = j
    return store


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        print(_ACCEPTANCE[-1])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
