"""The exploration store and the minimal-cost path search over it.

The store holds sampled states and a directed relation between them; every
recorded pair ``i -> j`` carries the simulated segment that connects them.
The cheapest path from Init to Unsafe is found with Dijkstra's algorithm on
the graph whose vertices are the stored points plus an auxiliary source and
goal.  Gap edges between same-mode points are generated on the fly while
relaxing a vertex instead of being stored.
"""

from __future__ import annotations

import heapq
import json
import logging
from pathlib import Path

import numpy as np

from .cost import GAP, INF, RELATED, CostWeights, PathCandidate, dist_init, dist_unsafe, path_cost, row_norms
from .model import Problem, State
from .simulate import Event, SimConfig, TrajectorySegment, flow, flow_backward

log = logging.getLogger(__name__)

ENDPOINT_TOL = 1e-9


class StoreError(ValueError):
    pass


class ExplorationStore:
    """Points, the witnessed relation between them, and cached terminal distances."""

    def __init__(self, problem: Problem, box_tol: float = 1e-9):
        self.problem = problem
        self.box_tol = box_tol
        self.points: list[State] = []
        self.tags: list[str] = []
        self.d_init: list[float] = []
        self.d_unsafe: list[float] = []
        self.succ: dict[int, dict[int, TrajectorySegment]] = {}
        self._by_mode: dict[str, list[int]] = {}
        self._mode_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return len(self.points)

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.succ.values())

    def add_point(self, p: State, tag: str = "") -> int:
        if not self.problem.system.in_domain(p, tol=self.box_tol):
            raise StoreError(f"{p} is outside its mode domain")
        i = len(self.points)
        self.points.append(p)
        self.tags.append(tag)
        self.d_init.append(dist_init(self.problem.init, p))
        self.d_unsafe.append(dist_unsafe(self.problem.unsafe, p))
        self._by_mode.setdefault(p.mode, []).append(i)
        self._mode_cache.pop(p.mode, None)
        return i

    def add_edge(self, i: int, j: int, witness: TrajectorySegment) -> None:
        """Record ``i -> j``; ``witness`` must run from point ``i`` to point ``j``."""
        for label, k, s in (("start", i, witness.start), ("end", j, witness.end)):
            if not 0 <= k < len(self.points):
                raise StoreError(f"unknown point id {k}")
            p = self.points[k]
            if s.mode != p.mode or np.max(np.abs(s.x - p.x), initial=0.0) > ENDPOINT_TOL:
                raise StoreError(f"witness {label} {s} does not match point {k} {p}")
        if i == j and witness.duration > 0 and not witness.ok:
            raise StoreError("self-loop without a valid witness")
        self.succ.setdefault(i, {})[j] = witness

    def related(self, i: int, j: int) -> bool:
        return j in self.succ.get(i, ())

    def witness(self, i: int, j: int) -> TrajectorySegment:
        return self.succ[i][j]

    def incident(self, i: int) -> bool:
        if self.succ.get(i):
            return True
        return any(i in out for out in self.succ.values())

    # terminal distances by state, for paths whose states are not all stored
    def d_init_of(self, p: State) -> float:
        return dist_init(self.problem.init, p)

    def d_unsafe_of(self, p: State) -> float:
        return dist_unsafe(self.problem.unsafe, p)

    def mode_block(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        """Point ids of one mode and their stacked continuous states."""
        hit = self._mode_cache.get(mode)
        if hit is None:
            ids = np.array(self._by_mode.get(mode, []), dtype=int)
            X = np.array([self.points[k].x for k in ids]) if ids.size else np.zeros((0, 0))
            hit = (ids, X)
            self._mode_cache[mode] = hit
        return hit

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "points": [{"mode": p.mode, "x": p.x.tolist(), "tag": t} for p, t in zip(self.points, self.tags)],
            "edges": [
                {"from": i, "to": j, "witness": _segment_to_dict(w)}
                for i, out in sorted(self.succ.items()) for j, w in sorted(out.items())
            ],
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, problem: Problem, data: dict) -> "ExplorationStore":
        store = cls(problem)
        for rec in data["points"]:
            store.add_point(State(rec["mode"], rec["x"]), rec.get("tag", ""))
        for rec in data["edges"]:
            store.add_edge(rec["from"], rec["to"], _segment_from_dict(rec["witness"]))
        return store

    @classmethod
    def load(cls, problem: Problem, path) -> "ExplorationStore":
        return cls.from_dict(problem, json.loads(Path(path).read_text()))


def _state_dict(s: State) -> dict:
    return {"mode": s.mode, "x": s.x.tolist()}


def _segment_to_dict(w: TrajectorySegment) -> dict:
    return {
        "start": _state_dict(w.start),
        "end": _state_dict(w.end),
        "duration": w.duration,
        "status": w.status,
        "backward": w.backward,
        "events": [
            {"time": e.time, "guard": e.guard, "pre": _state_dict(e.pre), "post": _state_dict(e.post)}
            for e in w.events
        ],
    }


def _segment_from_dict(d: dict) -> TrajectorySegment:
    def st(r):
        return State(r["mode"], r["x"])

    events = [Event(e["time"], e["guard"], st(e["pre"]), st(e["post"])) for e in d["events"]]
    return TrajectorySegment(start=st(d["start"]), end=st(d["end"]), duration=d["duration"],
                             events=events, status=d["status"], backward=d["backward"])


# -- shortest path ------------------------------------------------------------

def candidate_from_ids(store: ExplorationStore, ids, weights: CostWeights | None = None) -> PathCandidate:
    ids = list(ids)
    kinds, wits = [], []
    for a, b in zip(ids, ids[1:]):
        if store.related(a, b):
            kinds.append(RELATED)
            wits.append([store.witness(a, b)])
        else:
            kinds.append(GAP)
            wits.append(None)
    cand = PathCandidate([store.points[k] for k in ids], ids, kinds, wits)
    if weights is not None:
        cand.breakdown = path_cost(store, weights, ids)
    return cand


def min_cost_path(store: ExplorationStore, weights: CostWeights) -> PathCandidate | None:
    """Cheapest path from the auxiliary source to the auxiliary goal.

    The source reaches each point at its Init distance and each point reaches
    the goal at its Unsafe distance (infinite ones are left out).  Labels are
    compared as ``(cost, vertex count, point ids)`` so ties resolve to the
    shorter, then lexicographically smaller, path.  Returns ``None`` when no
    finite path exists.
    """
    omega = weights.omega
    n_pts = len(store.points)
    best: dict[int, tuple] = {}
    best_c = np.full(n_pts, INF)
    done = np.zeros(n_pts, dtype=bool)
    heap: list[tuple] = []
    for i, d in enumerate(store.d_init):
        if d < INF:
            best[i] = (d, 1, (i,))
            best_c[i] = d
            heapq.heappush(heap, (d, 1, (i,), i))
    goal = None

    def relax(u, lab):
        if not done[u] and (u not in best or lab < best[u]):
            best[u] = lab
            best_c[u] = lab[0]
            heapq.heappush(heap, lab + (u,))

    while heap:
        c, hops, path, v = heapq.heappop(heap)
        if v == -1:
            goal = path
            break
        if done[v] or best.get(v) != (c, hops, path):
            continue
        done[v] = True
        du = store.d_unsafe[v]
        if du < INF:
            heapq.heappush(heap, (c + du, hops, path, -1))
        rel = store.succ.get(v, {})
        for u in rel:
            relax(u, (c + 0.0, hops + 1, path + (u,)))
        ids, X = store.mode_block(store.points[v].mode)
        if ids.size:
            C = c + omega * row_norms(X - store.points[v].x)
            # only labels that can tie or beat the current best need the full comparison
            for k in np.flatnonzero((C <= best_c[ids]) & ~done[ids]):
                u = int(ids[k])
                if u != v and u not in rel:
                    relax(u, (float(C[k]), hops + 1, path + (u,)))
    if goal is None:
        return None
    return candidate_from_ids(store, goal, weights)


# -- seeding ------------------------------------------------------------------

def sample_on_guard(problem: Problem, mode_name: str, k: int, rng, lower=None, upper=None,
                    attempts: int = 50) -> np.ndarray | None:
    """A random point on guard ``k`` of a mode where the flow crosses into it.

    Samples the (optionally narrowed) mode box, projects onto the guard
    hyperplane and keeps the first point that lies in the box, is mapped
    into the target domain and has the flow pointing across the surface.
    """
    sys = problem.system
    mode = sys[mode_name]
    g = mode.guards[k]
    lo = mode.lower if lower is None else np.maximum(mode.lower, lower)
    hi = mode.upper if upper is None else np.minimum(mode.upper, upper)
    a = g.normal
    aa = float(a @ a)
    for _ in range(attempts):
        x = rng.uniform(lo, hi)
        x = x - (g.level(x) / aa) * a
        if not mode.contains(x, 1e-12):
            continue
        if not sys[g.target].contains(g.reset(x), 1e-9):
            continue
        if float(a @ mode.field(x)) <= 0.0:
            continue
        return x
    return None


def seed_boundaries(store: ExplorationStore, cfg: SimConfig, rng, t_seed: float = 0.05,
                    lower=None, upper=None) -> int:
    """Put one point on every guard surface and simulate a little both ways.

    The stored point is the pre-reset state on the surface; its forward run
    crosses into the target mode at once.  Returns the number of surfaces
    that yielded at least one relation edge.
    """
    sys = store.problem.system
    seeded = 0
    for name in sys.mode_names:
        for k in range(len(sys[name].guards)):
            x = sample_on_guard(store.problem, name, k, rng, lower, upper)
            if x is None:
                log.info("no seed point found on guard %d of mode %s", k, name)
                continue
            added = extend_from(store, store.add_point(State(name, x), "seed"), sys, cfg, t_seed, t_seed)
            if added:
                seeded += 1
            else:
                log.info("seed on guard %d of mode %s is solitary", k, name)
    return seeded


def extend_from(store: ExplorationStore, i: int, sys, cfg: SimConfig, t_fwd: float, t_bwd: float,
                forward: bool = True, backward: bool = True) -> int:
    """Simulate from stored point ``i`` and record the resulting edges.

    Failed or empty simulations are ignored.  Returns the number of edges added.
    """
    p = store.points[i]
    added = 0
    if forward and t_fwd > 0:
        seg = flow(sys, p, t_fwd, cfg)
        if seg.ok and seg.duration > 0 and store.problem.system.in_domain(seg.end, store.box_tol):
            j = store.add_point(seg.end, "forward")
            store.add_edge(i, j, _strip(seg))
            added += 1
    if backward and t_bwd > 0:
        seg = flow_backward(sys, p, t_bwd, cfg)
        if seg.ok and seg.duration > 0:
            j = store.add_point(seg.start, "backward")
            store.add_edge(j, i, _strip(seg))
            added += 1
    return added


def _strip(seg: TrajectorySegment) -> TrajectorySegment:
    # the store keeps witnesses without dense samples to bound memory
    seg.sample_times = seg.sample_modes = seg.sample_states = None
    return seg
