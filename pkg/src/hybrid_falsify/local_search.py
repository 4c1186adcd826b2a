"""Multiple-shooting local search over the segments of a candidate path.

A candidate path in alternating form ``p1 -> p2 ~ p3 -> p4 ~ ...`` is turned
into a list of segments, each given by its start state and duration.  The
objective

    (x1 - u)' E_I (x1 - u)
      + omega * sum_k |M(t_k, x_k) - x_{k+1}|^2
      + (M(t_m, x_m) - v)' E_U (M(t_m, x_m) - v)

is minimized over all start points and durations with a projected
quasi-Newton method.  Gradients come from the flow sensitivities (start
point) and the vector field at the segment end (duration).
"""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cost import RELATED, CostWeights, PathCandidate, euclid, normalize
from .model import Ellipsoid, HybridSystem, Problem, State, membership
from .sensitivity import flow_with_sensitivity
from .simulate import COMPLETED, LEFT_DOMAIN, ZENO, SimConfig, TrajectorySegment, flow

log = logging.getLogger(__name__)

ERROR_TRAJECTORY = "error_trajectory"
CONVERGED = "converged_above_threshold"
ABORTED_SENSITIVITY = "aborted_sensitivity"
ABORTED_DOMAIN = "aborted_domain"
ABORTED_SIMULATION = "aborted_simulation"
ITERATION_LIMIT = "iteration_limit"


class ShootingFailure(RuntimeError):
    def __init__(self, status: str, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class ShootingProblem:
    """Decision vector layout ``(x_1, t_1, x_2, t_2, ...)`` over segment modes."""

    system: HybridSystem
    init: Ellipsoid
    unsafe: Ellipsoid
    modes: list[str]
    z0: np.ndarray
    omega: float = 500.0
    epsilon: float = 1e-3
    max_duration: float = 100.0
    cfg: SimConfig = field(default_factory=lambda: SimConfig(record_samples=False))

    @property
    def n(self) -> int:
        return self.system.state_dim

    @property
    def n_segments(self) -> int:
        return len(self.modes)

    def split(self, z) -> list[tuple[State, float]]:
        n = self.n
        z = np.asarray(z, dtype=float)
        return [(State(m, z[k * (n + 1):k * (n + 1) + n]), float(z[k * (n + 1) + n]))
                for k, m in enumerate(self.modes)]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = [], []
        for m in self.modes:
            mode = self.system[m]
            lo.extend(mode.lower.tolist() + [0.0])
            hi.extend(mode.upper.tolist() + [self.max_duration])
        return np.array(lo), np.array(hi)

    def project(self, z) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(z, lo, hi)


@dataclass
class Evaluation:
    cost: float
    grad: np.ndarray
    residual: np.ndarray
    jacobian: np.ndarray
    segments: list[TrajectorySegment]
    gap_sum: float
    init_ok: bool
    unsafe_ok: bool
    modes_match: bool


@dataclass
class LocalResult:
    status: str
    z: np.ndarray
    cost: float
    breakdown: dict
    segments: list[TrajectorySegment]
    iterations: int
    evaluations: int
    simulated_time: float
    trace: list[dict] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == ERROR_TRAJECTORY


def _evaluate(prob: ShootingProblem, z) -> tuple[Evaluation, float]:
    """Objective, gradient and bookkeeping at ``z``; also returns simulated time.

    The objective is the squared norm of the stacked residual
    ``(L_I'(x_1 - u), sqrt(omega) gap_1, ..., L_U'(end_m - v))`` where
    ``E = L L'``; its Jacobian comes from the segment sensitivities and the
    vector field at each segment end.
    """
    n = prob.n
    parts = prob.split(z)
    m = len(parts)
    ends, Ss, fs, segs = [], [], [], []
    sim_time = 0.0
    for start, t in parts:
        tr = flow_with_sensitivity(prob.system, start, t, prob.cfg)
        seg = tr.segment
        sim_time += seg.duration
        if seg.status == LEFT_DOMAIN:
            raise ShootingFailure(ABORTED_DOMAIN, f"segment from {start} left the state space")
        if seg.status != COMPLETED:
            raise ShootingFailure(ABORTED_SIMULATION, f"segment from {start}: {seg.status}")
        if not tr.valid:
            raise ShootingFailure(ABORTED_SENSITIVITY, f"segment from {start} grazes a guard")
        segs.append(seg)
        ends.append(seg.end)
        Ss.append(tr.S_end)
        fs.append(prob.system[seg.end.mode].field(seg.end.x))

    w = np.sqrt(prob.omega)
    r = np.zeros((m + 1) * n)
    J = np.zeros(((m + 1) * n, len(z)))
    LI = prob.init._chol.T
    r[0:n] = LI @ (parts[0][0].x - prob.init.center.x)
    J[0:n, 0:n] = LI
    gaps = []
    modes_match = True
    for k in range(m - 1):
        nxt = parts[k + 1][0]
        modes_match &= ends[k].mode == nxt.mode
        gaps.append(euclid(ends[k].x, nxt.x))
        rows = slice((k + 1) * n, (k + 2) * n)
        base = k * (n + 1)
        r[rows] = w * (ends[k].x - nxt.x)
        J[rows, base:base + n] = w * Ss[k]
        J[rows, base + n] = w * fs[k]
        nb = (k + 1) * (n + 1)
        J[rows, nb:nb + n] = -w * np.eye(n)
    LU = prob.unsafe._chol.T
    rows = slice(m * n, (m + 1) * n)
    base = (m - 1) * (n + 1)
    r[rows] = LU @ (ends[-1].x - prob.unsafe.center.x)
    J[rows, base:base + n] = LU @ Ss[-1]
    J[rows, base + n] = LU @ fs[-1]
    ev = Evaluation(
        cost=float(r @ r), grad=2.0 * (J.T @ r), residual=r, jacobian=J,
        segments=segs, gap_sum=float(sum(gaps)),
        init_ok=membership(prob.init, parts[0][0]),
        unsafe_ok=membership(prob.unsafe, ends[-1]),
        modes_match=modes_match,
    )
    return ev, sim_time


def objective_and_gradient(prob: ShootingProblem, z) -> tuple[float, np.ndarray]:
    """Penalty cost and its gradient over the decision vector.

    Raises :class:`ShootingFailure` when a segment cannot be simulated or its
    sensitivity is undefined.
    """
    ev, _ = _evaluate(prob, z)
    return ev.cost, ev.grad


def replay(prob: ShootingProblem, z, slack: float = 1.0) -> TrajectorySegment:
    """Simulate once from the first start point for the total duration, stopping in Unsafe."""
    parts = prob.split(z)
    total = sum(t for _, t in parts)
    cfg = SimConfig(step=prob.cfg.step, event_tol=prob.cfg.event_tol, zeno_events=prob.cfg.zeno_events,
                    stop_on_unsafe=True, unsafe=prob.unsafe, graze_rel=prob.cfg.graze_rel,
                    box_tol=prob.cfg.box_tol, record_samples=True)
    return flow(prob.system, parts[0][0], total + slack, cfg)


def _success(prob, ev, z) -> tuple[bool, float]:
    """Success test; returns the flag and the simulated time spent checking."""
    # mode agreement at the gaps is not required: the single replay below is
    # a genuine trajectory and decides
    if not (ev.gap_sum < prob.epsilon and ev.init_ok and ev.unsafe_ok):
        return False, 0.0
    seg = replay(prob, z)
    return seg.status == "hit_unsafe", seg.duration


@dataclass(frozen=True)
class SearchOptions:
    max_iter: int = 200
    tol_g: float = 1e-6
    c1: float = 1e-4
    shrink: float = 0.5
    max_halvings: int = 40
    method: str = "gauss_newton"
    damping: float = 1e-3
    memory: int = 8
    stall_window: int = 15
    stall_rtol: float = 1e-8
    omega_growth: float = 10.0
    omega_rounds: int = 3


def _projected_grad(z, g, lo, hi):
    pg = g.copy()
    pg[(z <= lo) & (g > 0)] = 0.0
    pg[(z >= hi) & (g < 0)] = 0.0
    return pg


def _gauss_newton(ev, free, damping):
    """Damped Gauss-Newton step on the free variables."""
    d = np.zeros(len(ev.grad))
    Jf = ev.jacobian[:, free]
    H = Jf.T @ Jf
    H[np.diag_indices_from(H)] += damping * (1.0 + np.diag(H))
    try:
        d[free] = -np.linalg.solve(H, Jf.T @ ev.residual)
    except np.linalg.LinAlgError:
        d[free] = -ev.grad[free]
    return d


def _direction(pg, mem, use_qn):
    if not use_qn or not mem:
        return -pg
    q = pg.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = mem[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def minimize(prob: ShootingProblem, z0=None, opts: SearchOptions = SearchOptions()) -> LocalResult:
    """Projected descent with Armijo backtracking.

    The search direction is a damped Gauss-Newton step on the residual
    (``method="gauss_newton"``), a limited-memory BFGS step (``"lbfgs"``) or
    the negative projected gradient (``"gradient"``).  Variables sitting on a
    bound with the gradient pushing outward are held fixed for the step.

    Every accepted iterate lowers the cost.  A trial point whose simulation
    fails only halves the step; failure at the starting point ends the
    search with the corresponding abort status.

    With a fixed gap weight the minimizer keeps gaps of the order of the
    terminal gradients divided by ``omega``.  When the search stalls with
    both ends inside their sets but the gaps still above ``epsilon``, the gap
    weight is raised by ``omega_growth`` (at most ``omega_rounds`` times)
    and the descent continues from the current point.
    """
    z = prob.project(prob.z0 if z0 is None else np.asarray(z0, dtype=float))
    lo, hi = prob.bounds()
    state = {"sim": 0.0, "evals": 0}
    trace = []

    def evaluate(p, z):
        ev, st = _evaluate(p, z)
        state["sim"] += st
        state["evals"] += 1
        return ev

    def result(status, z, ev, it):
        segs = ev.segments if ev is not None else []
        cost = ev.cost if ev is not None else float("inf")
        bd = {"gap_sum": ev.gap_sum if ev else None, "init_ok": ev.init_ok if ev else None,
              "unsafe_ok": ev.unsafe_ok if ev else None, "omega": prob.omega}
        return LocalResult(status, z, cost, bd, segs, it, state["evals"], state["sim"], trace)

    def success(ev, z):
        ok, st = _success(prob, ev, z)
        state["sim"] += st
        return ok

    try:
        ev = evaluate(prob, z)
    except ShootingFailure as exc:
        log.debug("local search start failed: %s", exc)
        return result(exc.status, z, None, 0)
    if success(ev, z):
        return result(ERROR_TRAJECTORY, z, ev, 0)

    mem: deque = deque(maxlen=opts.memory)
    history: deque = deque(maxlen=opts.stall_window)
    rounds = 0
    damping = opts.damping
    for it in range(1, opts.max_iter + 1):
        pg = _projected_grad(z, ev.grad, lo, hi)
        gnorm = float(np.linalg.norm(pg))
        trace.append({"iteration": it, "cost": ev.cost, "grad_norm": gnorm, "omega": prob.omega})
        history.append(ev.cost)
        stalled = gnorm < opts.tol_g * (1.0 + abs(ev.cost)) or (
            len(history) == history.maxlen and history[0] - ev.cost <= opts.stall_rtol * (1.0 + abs(ev.cost)))
        accepted = None
        if not stalled:
            if opts.method == "gauss_newton":
                free = pg != 0.0
                d = _gauss_newton(ev, free, damping)
            else:
                d = _direction(pg, mem, opts.method == "lbfgs")
            if float(d @ pg) >= 0.0:
                mem.clear()
                d = -pg
            step = 1.0
            for _ in range(opts.max_halvings):
                trial = np.clip(z + step * d, lo, hi)
                try:
                    ev_t = evaluate(prob, trial)
                except ShootingFailure:
                    step *= opts.shrink
                    continue
                if ev_t.cost <= ev.cost + opts.c1 * float(ev.grad @ (trial - z)) and ev_t.cost < ev.cost:
                    accepted = (trial, ev_t)
                    break
                step *= opts.shrink
            if opts.method == "gauss_newton":
                if accepted is not None:
                    damping = max(damping / 3.0, 1e-9) if step == 1.0 else damping * 2.0
                elif damping < 1e6:
                    damping *= 10.0
                    continue
            if accepted is None and mem:
                mem.clear()
                continue
            stalled = accepted is None
        if stalled:
            if rounds < opts.omega_rounds and ev.init_ok and ev.unsafe_ok and ev.gap_sum >= prob.epsilon:
                rounds += 1
                prob = dataclasses.replace(prob, omega=prob.omega * opts.omega_growth)
                ev = evaluate(prob, z)
                mem.clear()
                history.clear()
                continue
            return result(CONVERGED, z, ev, it)
        z_new, ev_new = accepted
        s = z_new - z
        y = _projected_grad(z_new, ev_new.grad, lo, hi) - pg
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0:
            mem.append((s, y, 1.0 / sy))
        z, ev = z_new, ev_new
        if success(ev, z):
            return result(ERROR_TRAJECTORY, z, ev, it)
    return result(ITERATION_LIMIT, z, ev, opts.max_iter)


def path_to_shooting(problem: Problem, path: PathCandidate, weights: CostWeights,
                     join: bool = True, cfg: SimConfig | None = None,
                     max_duration: float = 100.0) -> ShootingProblem:
    """Decision vector of a candidate path.

    ``join`` merges runs of related edges into one longer segment; otherwise
    the shared state is duplicated and each edge becomes its own segment.
    """
    path = normalize(path, duplicate=not join)
    starts, durations = [], []
    k = 0
    m = len(path.states)
    while k < m:
        if k < m - 1 and path.edge_kinds[k] == RELATED:
            starts.append(path.states[k])
            durations.append(sum(w.duration for w in path.witnesses[k]))
            k += 2
        else:
            starts.append(path.states[k])
            durations.append(0.0)
            k += 1
    n = problem.system.state_dim
    z0 = np.zeros(len(starts) * (n + 1))
    for i, (s, t) in enumerate(zip(starts, durations)):
        z0[i * (n + 1):i * (n + 1) + n] = s.x
        z0[i * (n + 1) + n] = min(t, max_duration)
    kwargs = {} if cfg is None else {"cfg": cfg}
    return ShootingProblem(system=problem.system, init=problem.init, unsafe=problem.unsafe,
                           modes=[s.mode for s in starts], z0=z0, omega=weights.omega,
                           epsilon=weights.epsilon, max_duration=max_duration, **kwargs)
