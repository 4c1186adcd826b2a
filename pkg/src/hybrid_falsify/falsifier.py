"""The falsification loop and the bounded-horizon baseline.

Each iteration takes the cheapest path through the exploration store, hands
it to the local search if it has not been tried before, and otherwise (or if
the search fails) adds a fresh random state and simulates from it.  The loop
ends when the local search produces an error trajectory or the point budget
is spent.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .cost import CostWeights, euclid
from .local_search import SearchOptions, ShootingProblem, minimize, path_to_shooting, replay
from .model import Problem, State, membership, validate
from .path_graph import ExplorationStore, extend_from, min_cost_path, seed_boundaries
from .simulate import SimConfig, TrajectorySegment, flow

log = logging.getLogger(__name__)

FALSIFIED = "falsified"
BUDGET_EXHAUSTED = "budget_exhausted"
VARIANTS = ("two_sided", "forward_only", "backward_only", "pure_random")
SAMPLERS = ("random", "halton")
COLLAPSE = ("first", "after", "off")
MERGE = ("progressive", "off")


@dataclass(frozen=True)
class FalsifierConfig:
    t_fwd: float = 0.5
    t_bwd: float = 0.5
    t_seed: float = 0.05
    points_per_iter: int = 1
    each_mode: bool = False
    variant: str = "two_sided"
    max_points: int = 500
    epsilon: float = 1e-3
    omega: float = 500.0
    seed: int = 0
    stop_on_unsafe: bool = False
    sample_lower: tuple | None = None
    sample_upper: tuple | None = None
    sampler: str = "random"
    seed_boundaries: bool = True
    extend_existing: bool = False
    join: bool = True
    keep_local: bool = True
    collapse: str = "off"
    duration_scale: float | None = 10.0
    merge: str = "progressive"
    initial_points: tuple = ()
    step: float = 1e-2
    max_duration: float = 100.0
    search: SearchOptions = SearchOptions()

    def __post_init__(self):
        if self.max_points < 1:
            raise ValueError("max_points must be at least 1")
        if not (self.t_fwd > 0 and self.t_bwd > 0 and self.t_seed > 0):
            raise ValueError("simulation lengths must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.collapse not in COLLAPSE:
            raise ValueError(f"unknown collapse setting {self.collapse!r}")
        if self.duration_scale is not None and not self.duration_scale > 0:
            raise ValueError("duration_scale must be positive")
        if self.merge not in MERGE:
            raise ValueError(f"unknown merge setting {self.merge!r}")
        if self.points_per_iter < 1:
            raise ValueError("points_per_iter must be at least 1")

    def time_cap(self, path_duration: float) -> float:
        """Bound on shooting durations and collapse simulations for one path."""
        if self.duration_scale is None:
            return self.max_duration
        return min(self.max_duration, self.duration_scale * path_duration + 2.0)

    @property
    def weights(self) -> CostWeights:
        return CostWeights(omega=self.omega, epsilon=self.epsilon)

    def sim_config(self, problem: Problem, stop_on_unsafe: bool | None = None) -> SimConfig:
        stop = self.stop_on_unsafe if stop_on_unsafe is None else stop_on_unsafe
        return SimConfig(step=self.step, stop_on_unsafe=stop, unsafe=problem.unsafe, record_samples=False)


@dataclass
class RunReport:
    outcome: str
    segments: list[TrajectorySegment]
    trajectory: TrajectorySegment | None
    iterations: int
    simulated_time: float
    path_costs: list[float]
    wall_time: float
    points: int
    local_searches: int
    seed: int
    gap_sum: float | None = None
    store: ExplorationStore | None = field(default=None, repr=False)

    @property
    def falsified(self) -> bool:
        return self.outcome == FALSIFIED

    @property
    def initial_state(self) -> State | None:
        return self.trajectory.start if self.trajectory is not None else None

    def to_dict(self) -> dict:
        out = {
            "outcome": self.outcome,
            "seed": self.seed,
            "iterations": self.iterations,
            "simulated_time": self.simulated_time,
            "wall_time": self.wall_time,
            "points": self.points,
            "local_searches": self.local_searches,
            "path_costs": self.path_costs,
            "gap_sum": self.gap_sum,
        }
        if self.trajectory is not None:
            tr = self.trajectory
            out["initial_state"] = {"mode": tr.start.mode, "x": tr.start.x.tolist()}
            out["final_state"] = {"mode": tr.end.mode, "x": tr.end.x.tolist()}
            out["duration"] = tr.duration
            out["segments"] = [
                {"mode": s.start.mode, "x": s.start.x.tolist(), "duration": s.duration} for s in self.segments
            ]
        return out


# -- sampling -----------------------------------------------------------------

class _Sampler:
    """Mode uniformly at random, then a point uniformly in the (narrowed) mode box."""

    def __init__(self, problem: Problem, cfg: FalsifierConfig, rng):
        self.sys = problem.system
        self.names = self.sys.mode_names
        self.rng = rng
        self.lower = None if cfg.sample_lower is None else np.asarray(cfg.sample_lower, dtype=float)
        self.upper = None if cfg.sample_upper is None else np.asarray(cfg.sample_upper, dtype=float)

    def box(self, name):
        mode = self.sys[name]
        lo = mode.lower if self.lower is None else np.maximum(mode.lower, self.lower)
        hi = mode.upper if self.upper is None else np.minimum(mode.upper, self.upper)
        return lo, hi

    def __call__(self, mode: str | None = None) -> State:
        name = self.names[self.rng.integers(len(self.names))] if mode is None else mode
        lo, hi = self.box(name)
        return State(name, self.rng.uniform(lo, hi))


class _HaltonSampler(_Sampler):
    """Deterministic low-discrepancy points: first coordinate picks the mode."""

    def __init__(self, problem, cfg, rng):
        super().__init__(problem, cfg, rng)
        self.seq = qmc.Halton(d=self.sys.state_dim + 1, scramble=False)
        self.seq.fast_forward(1)  # skip the all-zero first point

    def _state(self, u, mode=None) -> State:
        k = min(int(u[0] * len(self.names)), len(self.names) - 1)
        name = self.names[k] if mode is None else mode
        lo, hi = self.box(name)
        return State(name, lo + u[1:] * (hi - lo))

    def __call__(self, mode=None) -> State:
        return self._state(self.seq.random(1)[0], mode)


def halton_points(problem: Problem, cfg: FalsifierConfig, count: int) -> list[State]:
    """The first ``count`` states the Halton sampler would produce."""
    s = _HaltonSampler(problem, cfg, None)
    return [s._state(u) for u in s.seq.random(count)]


def make_sampler(problem: Problem, cfg: FalsifierConfig, rng) -> _Sampler:
    return _HaltonSampler(problem, cfg, rng) if cfg.sampler == "halton" else _Sampler(problem, cfg, rng)


# -- reporting helpers --------------------------------------------------------

def verify_error_trajectory(problem: Problem, report: RunReport, epsilon: float,
                            step: float = 1e-2) -> bool:
    """Independent replay of a reported error trajectory.

    Re-simulates every segment from its start and the whole trajectory from
    the initial state (stopping at Unsafe), then checks the Init/Unsafe
    memberships and the gap sum.
    """
    if not report.falsified or report.trajectory is None:
        return False
    cfg = SimConfig(step=step, record_samples=False)
    ends = []
    for seg in report.segments:
        again = flow(problem.system, seg.start, seg.duration, cfg)
        if not again.ok:
            return False
        ends.append(again.end)
    gaps = 0.0
    for end, nxt in zip(ends, report.segments[1:]):
        gaps += euclid(end.x, nxt.start.x)
    if not (gaps < epsilon and membership(problem.init, report.segments[0].start)
            and membership(problem.unsafe, ends[-1])):
        return False
    stop = SimConfig(step=step, stop_on_unsafe=True, unsafe=problem.unsafe, record_samples=False)
    whole = flow(problem.system, report.trajectory.start, report.trajectory.duration + 1e-6, stop)
    return (membership(problem.init, whole.start) and whole.status == "hit_unsafe"
            and membership(problem.unsafe, whole.end))


def _report(outcome, local, sp, it, sim_time, costs, t0, store, searches, seed):
    segs, traj, gap = [], None, None
    if local is not None:
        segs = local.segments
        traj = replay(sp, local.z)
        gap = local.breakdown["gap_sum"]
    return RunReport(outcome=outcome, segments=segs, trajectory=traj, iterations=it,
                     simulated_time=sim_time, path_costs=costs, wall_time=time.perf_counter() - t0,
                     points=len(store) if store is not None else 0, local_searches=searches,
                     seed=seed, gap_sum=gap, store=store)


# -- the unbounded method -----------------------------------------------------

def run(problem: Problem, config: FalsifierConfig = FalsifierConfig()) -> RunReport:
    """Search for an error trajectory without a time horizon.

    ``max_points`` bounds the number of random states added after seeding;
    simulation endpoints and boundary seeds come on top of it.
    """
    diagnostics = validate(problem.system)
    if diagnostics:
        raise ValueError("invalid system: " + "; ".join(diagnostics))
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    cfg = config.sim_config(problem)
    weights = config.weights
    store = ExplorationStore(problem)
    sys = problem.system
    sample = make_sampler(problem, config, rng)
    sim_time = 0.0

    def extend(i, fwd=True, bwd=True):
        nonlocal sim_time
        before = len(store)
        n_edges = extend_from(store, i, sys, cfg, config.t_fwd, config.t_bwd, fwd, bwd)
        for k in range(before, len(store)):
            for j, w in store.succ.get(k, {}).items():
                sim_time += w.duration
            for j, w in store.succ.get(i, {}).items():
                if j == k:
                    sim_time += w.duration
        if n_edges == 0:
            log.debug("point %d stays solitary", i)

    if config.seed_boundaries:
        before = len(store)
        seed_boundaries(store, cfg, rng, config.t_seed, sample.lower, sample.upper)
        sim_time += sum(w.duration for out in store.succ.values() for w in out.values())
        log.debug("seeded %d boundary points", len(store) - before)

    for p in config.initial_points:
        extend(store.add_point(p, "initial"))

    tried: set = set()
    costs: list[float] = []
    added = 0
    it = 0
    searches = 0
    while True:
        it += 1
        path = min_cost_path(store, weights)
        if path is not None:
            costs.append(path.total)
            key = tuple(path.ids)
            if key not in tried:
                tried.add(key)
                horizon = config.time_cap(sum(path.segment_durations))
                sp = path_to_shooting(problem, path, weights, join=config.join, max_duration=horizon)
                if config.collapse == "first":
                    shot, sp1, spent, n = _try_collapse(problem, config, [State(sp.modes[0], sp.z0[:sp.n])],
                                                        horizon)
                    sim_time += spent
                    searches += n
                    if shot is not None:
                        return _report(FALSIFIED, shot, sp1, it, sim_time, costs, t0, store, searches, config.seed)
                local = minimize(sp, opts=config.search)
                searches += 1
                sim_time += local.simulated_time
                log.debug("iteration %d: path of %d states, cost %.4g -> %s %.4g", it, len(path),
                          path.total, local.status, local.cost)
                if local.success:
                    return _report(FALSIFIED, local, sp, it, sim_time, costs, t0, store, searches, config.seed)
                if config.merge == "progressive" and sp.n_segments > 1:
                    merged, sp1, spent, n = _merge_segments(sp, local, config)
                    sim_time += spent
                    searches += n
                    if merged is not None:
                        return _report(FALSIFIED, merged, sp1, it, sim_time, costs, t0, store, searches,
                                       config.seed)
                if config.collapse != "off":
                    starts = _collapse_starts(sp, local)
                    if config.collapse == "first":
                        starts = starts[1:]
                    shot, sp1, spent, n = _try_collapse(problem, config, starts, horizon)
                    sim_time += spent
                    searches += n
                    if shot is not None:
                        return _report(FALSIFIED, shot, sp1, it, sim_time, costs, t0, store, searches, config.seed)
                if config.keep_local:
                    _store_segments(store, local.segments)
        else:
            costs.append(float("inf"))
        if added >= config.max_points:
            break
        batch = [None] * config.points_per_iter
        if config.each_mode:
            batch = [m for m in sys.mode_names for _ in range(config.points_per_iter)]
        for mode in batch[:config.max_points - added]:
            p = sample(mode)
            i = store.add_point(p, "random")
            added += 1
            if config.variant == "two_sided":
                extend(i)
            elif config.variant == "forward_only":
                extend(i, bwd=False)
            elif config.variant == "backward_only":
                extend(i, fwd=False)
            if config.extend_existing and len(store) > 1:
                extend(int(rng.integers(len(store))))
    return _report(BUDGET_EXHAUSTED, None, None, it, sim_time, costs, t0, store, searches, config.seed)


def _store_segments(store: ExplorationStore, segments) -> None:
    """Keep the segments of a failed local search as witnessed pairs.

    They are genuine simulations, so the next path query can start from the
    improved trajectory pieces instead of the original coarse ones.
    """
    for seg in segments:
        if not seg.ok or seg.duration <= 0:
            continue
        sys = store.problem.system
        if not (sys.in_domain(seg.start, store.box_tol) and sys.in_domain(seg.end, store.box_tol)):
            continue
        i = store.add_point(seg.start, "local")
        j = store.add_point(seg.end, "local")
        store.add_edge(i, j, seg)


def theorem_mode(config: FalsifierConfig, deterministic: bool = False) -> FalsifierConfig:
    """Restrict a configuration to the regime covered by the completeness results.

    Forward simulations only, of one fixed length, stopping on Unsafe, with
    full-support random sampling (or a Halton sequence when
    ``deterministic``).
    """
    return dataclasses.replace(
        config, variant="forward_only", stop_on_unsafe=True,
        sampler="halton" if deterministic else "random", extend_existing=False,
    )


# -- the bounded-horizon baseline ---------------------------------------------

def _collapse_starts(sp: ShootingProblem, local) -> list[State]:
    """Initial states worth a single-segment attempt after a failed path search."""
    n = sp.n
    out = [State(sp.modes[0], sp.z0[:n])]
    if local.z is not None and not np.allclose(local.z[:n], sp.z0[:n]):
        out.append(State(sp.modes[0], local.z[:n]))
    return out


def _merge_segments(sp: ShootingProblem, local, config: FalsifierConfig):
    """Join the first two shooting segments and re-optimize until one is left.

    The joined segment starts at the first start state and lasts the sum of
    both durations; the other segments keep their optimized values.
    """
    n = sp.n
    z = local.z
    spent, count = 0.0, 0
    while sp.n_segments > 1:
        z = np.concatenate([z[:n], [z[n] + z[2 * n + 1]], z[2 * (n + 1):]])
        sp = dataclasses.replace(sp, modes=[sp.modes[0]] + sp.modes[2:], z0=z)
        res = minimize(sp, opts=config.search)
        spent += res.simulated_time
        count += 1
        if res.success:
            return res, sp, spent, count
        if res.z is None:
            break
        z = res.z
    return None, None, spent, count


def _try_collapse(problem, config, starts, horizon):
    """Single-segment attempts from each start; returns the first success."""
    spent_total, n = 0.0, 0
    for start in starts:
        shot, sp1, spent = single_shot(problem, config, start, horizon)
        spent_total += spent
        if shot is not None:
            n += 1
            if shot.success:
                return shot, sp1, spent_total, n
    return None, None, spent_total, n


def single_shot(problem: Problem, config: FalsifierConfig, p: State, horizon: float):
    """Simulate ``p`` for ``horizon`` and refine the closest approach to Unsafe.

    If the trajectory visits Unsafe's mode, it is cut at the sample with the
    smallest Unsafe penalty and handed to the local search as one shooting
    segment.  Returns ``(result or None, shooting problem or None, simulated time)``.
    """
    sys = problem.system
    target = problem.unsafe.center.mode
    seg = flow(sys, p, horizon, SimConfig(step=config.step, record_samples=True))
    spent = seg.duration
    if seg.sample_times is None:
        return None, None, spent
    hit = [k for k, m in enumerate(seg.sample_modes) if m == target]
    if not hit:
        return None, None, spent
    X = seg.sample_states[hit] - problem.unsafe.center.x
    q = np.einsum("ij,jk,ik->i", X, problem.unsafe.shape, X)
    t_cut = float(seg.sample_times[hit[int(np.argmin(q))]])
    sp = ShootingProblem(system=sys, init=problem.init, unsafe=problem.unsafe, modes=[p.mode],
                         z0=np.concatenate([p.x, [t_cut]]), omega=config.omega, epsilon=config.epsilon,
                         max_duration=horizon, cfg=SimConfig(step=config.step, record_samples=False))
    local = minimize(sp, opts=config.search)
    return local, sp, spent + local.simulated_time


def run_bounded_baseline(problem: Problem, config: FalsifierConfig, horizon: float) -> RunReport:
    """Random simulations of length ``horizon`` from Init's mode.

    Up to ``max_points`` trials.  A trajectory that reaches Unsafe's mode is
    cut at its point nearest to the Unsafe centre and handed to the local
    search as a single shooting segment.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    sample = make_sampler(problem, config, rng)
    init_mode = problem.init.center.mode
    sim_time = 0.0
    costs: list[float] = []
    searches = 0
    for trial in range(1, config.max_points + 1):
        local, sp, spent = single_shot(problem, config, sample(init_mode), horizon)
        sim_time += spent
        if local is None:
            continue
        searches += 1
        costs.append(local.cost)
        if local.success:
            return _report(FALSIFIED, local, sp, trial, sim_time, costs, t0, None, searches, config.seed)
    return _report(BUDGET_EXHAUSTED, None, None, config.max_points, sim_time, costs, t0, None,
                   searches, config.seed)
