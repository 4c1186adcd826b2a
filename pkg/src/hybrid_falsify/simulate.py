"""Event-detecting fixed-step RK4 simulation of hybrid trajectories.

Within a mode the classical fourth-order Runge-Kutta scheme is applied with a
fixed step.  For an affine field ``f(x) = A x + b`` one RK4 step of size ``s``
from ``x`` is exactly the degree-four Taylor polynomial

    x + s f + s^2/2 A f + s^3/6 A^2 f + s^4/24 A^3 f,      f = f(x),

so whole runs of steps are evaluated with precomputed powers of the step
transition matrix, and intermediate points of a step (needed to localize
events) come from the same polynomial.  Guard crossings are localized by
bisection on the guard level function inside the step where the sign change
was observed.

Sensitivities ``dM/dx`` are carried along with the same steps and updated at
guard crossings with the saltation matrix; :mod:`hybrid_falsify.sensitivity`
exposes them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .model import Ellipsoid, HybridSystem, Mode, State

COMPLETED = "completed"
HIT_UNSAFE = "hit_unsafe"
LEFT_DOMAIN = "left_domain"
ZENO = "zeno_suspected"
STEP_FAILURE = "step_failure"
STATUSES = (COMPLETED, HIT_UNSAFE, LEFT_DOMAIN, ZENO, STEP_FAILURE)

_CHUNK = 64
_SUBDIV = 16
_ZERO_TOL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    step: float = 1e-2
    event_tol: float = 1e-12
    zeno_events: int = 100
    stop_on_unsafe: bool = False
    unsafe: Ellipsoid | None = None
    graze_rel: float = 1e-6
    box_tol: float = 1e-9
    record_samples: bool = True

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.event_tol > 0:
            raise ValueError("event_tol must be positive")
        if self.zeno_events < 1:
            raise ValueError("zeno_events must be at least 1")
        if self.stop_on_unsafe and self.unsafe is None:
            raise ValueError("stop_on_unsafe requires an unsafe ellipsoid")


@dataclass(frozen=True)
class Event:
    time: float
    guard: int
    pre: State
    post: State


@dataclass
class TrajectorySegment:
    start: State
    end: State
    duration: float
    events: list[Event]
    status: str
    backward: bool = False
    sample_times: np.ndarray | None = None
    sample_modes: list[str] | None = None
    sample_states: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status in (COMPLETED, HIT_UNSAFE)

    @property
    def samples(self) -> list[tuple[float, State]]:
        if self.sample_times is None:
            return []
        return [
            (float(t), State(m, x))
            for t, m, x in zip(self.sample_times, self.sample_modes, self.sample_states)
        ]

    def dwell_times(self) -> list[float]:
        """Time spent in each visited mode, in order."""
        marks = [0.0] + [ev.time for ev in self.events] + [self.duration]
        return [b - a for a, b in zip(marks, marks[1:])]


@dataclass
class _Sensitivity:
    matrix: np.ndarray
    saltations: list[np.ndarray] = field(default_factory=list)
    grazing: bool = False


# -- generic RK4, kept as the reference the affine propagator must match ------

def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# -- affine RK4 propagator ----------------------------------------------------

def _taylor_poly(A: np.ndarray, s: float) -> np.ndarray:
    n = A.shape[0]
    A2 = A @ A
    return s * np.eye(n) + (s * s / 2.0) * A + (s ** 3 / 6.0) * A2 + (s ** 4 / 24.0) * (A2 @ A)


class _Kernel:
    """RK4 machinery for one mode integrated in one time direction."""

    def __init__(self, mode: Mode, sign: float, h: float):
        self.mode = mode
        self.A = sign * mode.A
        self.b = sign * mode.b
        self.h = h
        n = self.b.size
        self.n = n
        poly = _taylor_poly(self.A, h)
        phi = np.eye(n) + poly @ self.A
        gam = poly @ self.b
        P = np.empty((_CHUNK + 1, n, n))
        G = np.empty((_CHUNK + 1, n))
        P[0] = np.eye(n)
        G[0] = 0.0
        for k in range(1, _CHUNK + 1):
            P[k] = phi @ P[k - 1]
            G[k] = phi @ G[k - 1] + gam
        self.P = P
        self.G = G
        if mode.guards:
            self.gn = np.array([g.normal for g in mode.guards])
            self.go = np.array([g.offset for g in mode.guards])
        else:
            self.gn = np.zeros((0, n))
            self.go = np.zeros(0)

    def field(self, x):
        return self.A @ x + self.b

    def coeffs(self, x):
        """Rows c_m with x(s) = x + sum_m s^m c_m for one RK4 step of size s."""
        f = self.field(x)
        Af = self.A @ f
        A2f = self.A @ Af
        return np.stack([f, Af / 2.0, A2f / 6.0, (self.A @ A2f) / 24.0])

    @staticmethod
    def at(x, coeffs, s):
        return x + s * (coeffs[0] + s * (coeffs[1] + s * (coeffs[2] + s * coeffs[3])))

    def at_many(self, x, coeffs, sig):
        powers = np.stack([sig, sig ** 2, sig ** 3, sig ** 4], axis=1)
        return x + powers @ coeffs

    def transition(self, s):
        poly = _taylor_poly(self.A, s)
        return np.eye(self.n) + poly @ self.A, poly @ self.b

    def levels(self, X):
        return X @ self.gn.T + self.go


@lru_cache(maxsize=4096)
def _kernel(mode: Mode, sign: float, h: float) -> _Kernel:
    return _Kernel(mode, sign, h)


def _bisect(pred: Callable[[float], bool], lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Shrink ``[lo, hi]`` with ``pred(lo)`` false and ``pred(hi)`` true."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


def detect_event(g: Callable[[float], float], bracket: tuple[float, float], cfg: SimConfig | float) -> float:
    """Earliest time in ``bracket`` at which ``g`` becomes nonnegative.

    ``g`` must be negative at the left end and nonnegative at the right end.
    The bracket is first scanned on a uniform sub-grid so that the earliest
    sign change is the one refined; the returned time satisfies ``g >= 0``
    and lies within the event tolerance of the crossing.
    """
    tol = cfg.event_tol if isinstance(cfg, SimConfig) else float(cfg)
    lo, hi = map(float, bracket)
    if not hi > lo:
        raise ValueError("empty bracket")
    if g(lo) >= 0.0:
        raise ValueError("g is already nonnegative at the left end of the bracket")
    if g(hi) < 0.0:
        raise ValueError("g is negative at the right end of the bracket")
    grid = np.linspace(lo, hi, _SUBDIV + 1)
    for a, b in zip(grid[:-1], grid[1:]):
        b = hi if b >= hi else float(b)
        if g(b) >= 0.0:
            return _bisect(lambda t: g(t) >= 0.0, float(a), b, tol)[1]
    return hi


# -- forward simulation -------------------------------------------------------

class _Forward:
    def __init__(self, sys: HybridSystem, cfg: SimConfig, track: bool):
        self.sys = sys
        self.cfg = cfg
        self.track = track
        self.unsafe = cfg.unsafe if cfg.stop_on_unsafe else None
        self.events: list[Event] = []
        self.times: list[np.ndarray] = []
        self.modes: list[str] = []
        self.states: list[np.ndarray] = []

    def record(self, t0, mode_name, X):
        if not self.cfg.record_samples or len(X) == 0:
            return
        h = self.cfg.step
        self.times.append(t0 + h * np.arange(1, len(X) + 1))
        self.modes.extend([mode_name] * len(X))
        self.states.append(np.array(X))

    def record_point(self, t, mode_name, x):
        if self.cfg.record_samples:
            self.times.append(np.array([t]))
            self.modes.append(mode_name)
            self.states.append(np.array([x]))

    def in_unsafe(self, mode_name, X):
        u = self.unsafe
        d = np.atleast_2d(X) - u.center.x
        return np.einsum("ij,jk,ik->i", d, u.shape, d) <= 1.0

    def run(self, s: State, duration: float):
        cfg = self.cfg
        h = cfg.step
        n = self.sys.state_dim
        mode = self.sys.modes.get(s.mode)
        x = np.array(s.x, dtype=float)
        t = 0.0
        S = np.eye(n) if self.track else None
        sens = _Sensitivity(S) if self.track else None
        self.record_point(0.0, s.mode, x)

        if mode is None or not mode.contains(x, cfg.box_tol):
            return self.finish(s, s, 0.0, LEFT_DOMAIN, sens)
        if duration < 0:
            raise ValueError("duration must be nonnegative")

        while True:
            kern = _kernel(mode, 1.0, h)
            watch_unsafe = self.unsafe is not None and mode.name == self.unsafe.center.mode
            if watch_unsafe and self.in_unsafe(mode.name, x)[0]:
                return self.finish(s, State(mode.name, x), t, HIT_UNSAFE, sens, S)
            if t >= duration:
                return self.finish(s, State(mode.name, x), duration, COMPLETED, sens, S)

            # a guard we start on fires at once when the flow points into it
            lv = kern.levels(x[None, :])[0]
            if lv.size:
                rate = kern.gn @ kern.field(x)
                hot = np.flatnonzero((lv >= 0.0) & (rate > 0.0))
                if hot.size:
                    outcome = self.jump(mode, kern, int(hot[0]), x, t, S, sens)
                    if isinstance(outcome, tuple):
                        mode, x, S = outcome
                        continue
                    return outcome

            t_left = duration - t
            n_full = int(math.floor(t_left / h + 1e-9))
            rem = t_left - n_full * h
            if rem < 1e-12 * h:
                rem = 0.0
            steps = [h] * n_full + ([rem] if rem > 0.0 else [])
            total = len(steps)

            i = 0
            jumped = False
            while i < total:
                if i < n_full:
                    kk = min(_CHUNK, n_full - i)
                    X = np.einsum("kij,j->ki", kern.P[1:kk + 1], x) + kern.G[1:kk + 1]
                    sizes = None
                else:
                    kk = 1
                    X = kern.at(x, kern.coeffs(x), rem)[None, :]
                    sizes = rem
                hit = self.first_trigger(kern, x, X, watch_unsafe)
                if hit is None:
                    if sizes is None:
                        self.record(t, mode.name, X)
                        if self.track:
                            S = kern.P[kk] @ S
                        t += kk * h
                    else:
                        if self.track:
                            S = kern.transition(rem)[0] @ S
                        t = duration
                        self.record_point(t, mode.name, X[0])
                    x = X[-1]
                    i += kk
                    continue

                # refine inside the flagged step
                x_prev = x if hit == 0 else X[hit - 1]
                if sizes is None:
                    self.record(t, mode.name, X[:hit])
                    if self.track:
                        S = kern.P[hit] @ S
                    t_prev = t + hit * h
                    size = h
                else:
                    t_prev = t
                    size = rem
                last = (i + hit == total - 1)
                kind, sigma, guard_idx, x_hit = self.refine(kern, x_prev, X[hit], size, watch_unsafe)
                S_hit = None
                if self.track:
                    S_hit = (kern.P[1] if (sigma == size and sizes is None) else kern.transition(sigma)[0]) @ S
                t_hit = t_prev + sigma
                if kind == "nan":
                    return self.finish(s, State(mode.name, x_prev), t_prev, STEP_FAILURE, sens, S)
                if kind == "box":
                    return self.finish(s, State(mode.name, x_hit), t_hit, LEFT_DOMAIN, sens, S_hit)
                if kind == "unsafe":
                    self.record_point(t_hit, mode.name, x_hit)
                    return self.finish(s, State(mode.name, x_hit), t_hit, HIT_UNSAFE, sens, S_hit)
                # guard crossing
                if last and sigma >= size:
                    # reset exactly at the end: keep the pre-reset point
                    self.record_point(duration, mode.name, x_hit)
                    return self.finish(s, State(mode.name, x_hit), duration, COMPLETED, sens, S_hit)
                self.record_point(t_hit, mode.name, x_hit)
                outcome = self.jump(mode, kern, guard_idx, x_hit, t_hit, S_hit, sens)
                if isinstance(outcome, tuple):
                    mode, x, S = outcome
                    t = t_hit
                    jumped = True
                    break
                return outcome
            if not jumped:
                return self.finish(s, State(mode.name, x), duration, COMPLETED, sens, S)

    def first_trigger(self, kern, x0, X, watch_unsafe):
        """Index of the first step in ``X`` that needs refinement, or None."""
        cfg = self.cfg
        mode = kern.mode
        flags = ~np.all(np.isfinite(X), axis=1)
        flags |= np.any((X > mode.upper + cfg.box_tol) | (X < mode.lower - cfg.box_tol), axis=1)
        if kern.go.size:
            L = kern.levels(np.vstack([x0[None, :], X]))
            flags |= np.any((L[:-1] < 0.0) & (L[1:] >= 0.0), axis=1)
        if watch_unsafe:
            ins = self.in_unsafe(mode.name, np.vstack([x0[None, :], X]))
            flags |= ins[1:] & ~ins[:-1]
        idx = np.flatnonzero(flags)
        return int(idx[0]) if idx.size else None

    def refine(self, kern, x_prev, x_next, size, watch_unsafe):
        """Locate the earliest trigger inside one step.

        Returns ``(kind, sigma, guard, x)`` with ``kind`` one of ``guard``,
        ``unsafe``, ``box`` or ``nan`` and ``sigma`` the offset into the step.
        """
        cfg = self.cfg
        mode = kern.mode
        c = kern.coeffs(x_prev)
        sig = np.linspace(0.0, size, _SUBDIV + 1)
        Xs = kern.at_many(x_prev, c, sig)
        Xs[0] = x_prev
        Xs[-1] = x_next

        def state(s_):
            return x_next if s_ >= size else kern.at(x_prev, c, s_)

        if not np.all(np.isfinite(Xs)):
            return "nan", 0.0, -1, x_prev

        candidates = []  # (sigma, priority, kind, guard)
        L = kern.levels(Xs) if kern.go.size else None
        if watch_unsafe:
            ins = self.in_unsafe(mode.name, Xs)
        for k in range(1, _SUBDIV + 1):
            a, b = float(sig[k - 1]), (size if k == _SUBDIV else float(sig[k]))
            if L is not None:
                crossing = np.flatnonzero((L[k - 1] < 0.0) & (L[k] >= 0.0))
                for j in crossing:
                    gn, go = kern.gn[j], kern.go[j]
                    sj = _bisect(lambda s_: gn @ state(s_) + go >= 0.0, a, b, cfg.event_tol)[1]
                    candidates.append((sj, 1, "guard", int(j)))
            if watch_unsafe and ins[k] and not ins[k - 1]:
                su = _bisect(lambda s_: self.in_unsafe(mode.name, state(s_))[0], a, b, cfg.event_tol)[1]
                candidates.append((su, 0, "unsafe", -1))
            out = (Xs[k] > mode.upper + cfg.box_tol) | (Xs[k] < mode.lower - cfg.box_tol)
            if np.any(out):
                def outside(s_):
                    y = state(s_)
                    return bool(np.any((y > mode.upper + cfg.box_tol) | (y < mode.lower - cfg.box_tol)))
                sb = _bisect(outside, a, b, cfg.event_tol)[1]
                candidates.append((sb, 2, "box", -1))
            if candidates:
                break
        if not candidates:
            # sign change seen at sample resolution but not confirmed; take the step end
            L1 = kern.levels(x_next[None, :])[0] if kern.go.size else np.zeros(0)
            j = int(np.flatnonzero(L1 >= 0.0)[0]) if np.any(L1 >= 0.0) else -1
            if j >= 0:
                return "guard", size, j, x_next
            return "box", size, -1, x_next
        sigma, _, kind, j = min(candidates)
        return kind, sigma, j, state(sigma)

    def jump(self, mode, kern, j, x_pre, t, S, sens):
        cfg = self.cfg
        guard = mode.guards[j]
        target = self.sys.modes[guard.target]
        x_post = guard.reset(x_pre)
        pre = State(mode.name, x_pre)
        post = State(target.name, x_post)
        self.events.append(Event(t, j, pre, post))
        self.record_point(t, target.name, x_post)
        if self.track:
            f_minus = mode.field(x_pre)
            f_plus = target.field(x_post)
            rate = float(guard.normal @ f_minus)
            scale = float(np.linalg.norm(guard.normal) * np.linalg.norm(f_minus))
            R = guard.reset_matrix
            if abs(rate) < cfg.graze_rel * scale or rate == 0.0:
                sens.grazing = True
                S_new = R @ S
                sens.saltations.append(R.copy())
            else:
                salt = R + np.outer(f_plus - R @ f_minus, guard.normal) / rate
                S_new = salt @ S
                sens.saltations.append(salt)
        else:
            S_new = None
        if not target.contains(x_post, cfg.box_tol):
            return self.finish(None, post, t, LEFT_DOMAIN, sens, S_new)
        recent = sum(1 for ev in self.events if ev.time > t - 1.0)
        if recent > cfg.zeno_events:
            return self.finish(None, post, t, ZENO, sens, S_new)
        return target, x_post, S_new

    def finish(self, start, end, duration, status, sens, S=None):
        if sens is not None and S is not None:
            sens.matrix = S
        self._result = (end, duration, status, sens)
        return self

    def segment(self, start: State):
        end, duration, status, sens = self._result
        seg = TrajectorySegment(start=start, end=end, duration=float(duration),
                                events=self.events, status=status)
        if self.cfg.record_samples and self.times:
            seg.sample_times = np.concatenate(self.times)
            seg.sample_modes = self.modes
            seg.sample_states = np.vstack(self.states)
        return seg, sens


def _simulate(sys: HybridSystem, s: State, t: float, cfg: SimConfig, track: bool):
    if t < 0:
        raise ValueError("duration must be nonnegative")
    runner = _Forward(sys, cfg, track)
    runner.run(s, float(t))
    return runner.segment(s)


def flow(sys: HybridSystem, s: State, t: float, cfg: SimConfig) -> TrajectorySegment:
    """Simulate forward from ``s`` for time ``t``.

    A reset landing exactly at ``t`` is not applied: the end state is the
    point before the reset.  With ``cfg.stop_on_unsafe`` the run stops as soon
    as the unsafe ellipsoid is entered.
    """
    return _simulate(sys, s, t, cfg, track=False)[0]


# -- backward simulation ------------------------------------------------------

def flow_backward(sys: HybridSystem, s: State, t: float, cfg: SimConfig) -> TrajectorySegment:
    """Integrate ``x' = -f(x)`` from ``s`` for at most time ``t`` within one mode.

    The run stops early, with status ``completed``, when any guard level
    function of the mode changes sign or the mode's box is about to be left.
    The returned segment is oriented in forward time: it ends at ``s``.
    """
    if t < 0:
        raise ValueError("duration must be nonnegative")
    h = cfg.step
    mode = sys.modes.get(s.mode)
    x = np.array(s.x, dtype=float)
    if mode is None or not mode.contains(x, cfg.box_tol):
        return TrajectorySegment(start=s, end=s, duration=0.0, events=[], status=LEFT_DOMAIN, backward=True)
    kern = _kernel(mode, -1.0, h)

    # which side of each guard we are on; exact zeros are resolved by the flow direction
    lv = kern.levels(x[None, :])[0]
    rate = kern.gn @ kern.field(x)
    positive = np.where(np.abs(lv) <= _ZERO_TOL, rate > 0.0, lv > 0.0)

    def bad(X):
        X = np.atleast_2d(X)
        out = ~np.all(np.isfinite(X), axis=1)
        out |= np.any((X > mode.upper + cfg.box_tol) | (X < mode.lower - cfg.box_tol), axis=1)
        if kern.go.size:
            L = kern.levels(X)
            out |= np.any(np.where(positive, L < 0.0, L >= 0.0), axis=1)
        return out

    n_full = int(math.floor(t / h + 1e-9))
    rem = t - n_full * h
    if rem < 1e-12 * h:
        rem = 0.0
    tau = 0.0
    traj_t = [0.0]
    traj_x = [x]
    status = COMPLETED
    i = 0
    stopped = False
    while i < n_full or (rem > 0.0 and i == n_full):
        if i < n_full:
            kk = min(_CHUNK, n_full - i)
            X = np.einsum("kij,j->ki", kern.P[1:kk + 1], x) + kern.G[1:kk + 1]
            size = h
        else:
            kk = 1
            X = kern.at(x, kern.coeffs(x), rem)[None, :]
            size = rem
        flags = bad(X)
        idx = np.flatnonzero(flags)
        if idx.size == 0:
            if size == h:
                traj_t.extend(tau + h * np.arange(1, kk + 1))
                tau += kk * h
            else:
                tau = t
                traj_t.append(tau)
            traj_x.extend(X)
            x = X[-1]
            i += kk
            continue
        k = int(idx[0])
        if k:
            traj_t.extend(tau + h * np.arange(1, k + 1))
            traj_x.extend(X[:k])
            tau += k * h
            x = X[k - 1]
        c = kern.coeffs(x)
        sig = _bisect(lambda s_: bool(bad(kern.at(x, c, s_))[0]), 0.0, size, cfg.event_tol)[0]
        x_stop = kern.at(x, c, sig)
        if not np.all(np.isfinite(x_stop)):
            status = STEP_FAILURE
        tau += sig
        traj_t.append(tau)
        traj_x.append(x_stop)
        x = x_stop
        stopped = True
        break
    if not stopped:
        tau = t
        traj_t[-1] = t
    start = State(mode.name, x)
    seg = TrajectorySegment(start=start, end=s, duration=float(tau), events=[], status=status, backward=True)
    if cfg.record_samples:
        times = tau - np.array(traj_t[::-1])
        seg.sample_times = np.clip(times, 0.0, None)
        seg.sample_modes = [mode.name] * len(times)
        seg.sample_states = np.array(traj_x[::-1])
    return seg


# -- export -------------------------------------------------------------------

def write_trajectory_csv(segment: TrajectorySegment, path) -> None:
    """Write samples as ``time, mode, x1..xn`` rows."""
    path = Path(path)
    samples = segment.samples or [(0.0, segment.start), (segment.duration, segment.end)]
    n = segment.start.x.size
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mode"] + [f"x{i + 1}" for i in range(n)])
        for t, st in samples:
            w.writerow([repr(float(t)), st.mode] + [repr(float(v)) for v in st.x])


def events_to_json(segment: TrajectorySegment) -> list[dict]:
    return [
        {
            "time": ev.time,
            "guard": ev.guard,
            "from_mode": ev.pre.mode,
            "pre": ev.pre.x.tolist(),
            "to_mode": ev.post.mode,
            "post": ev.post.x.tolist(),
        }
        for ev in segment.events
    ]


def write_event_log(segment: TrajectorySegment, path) -> None:
    payload = {
        "status": segment.status,
        "duration": segment.duration,
        "start": {"mode": segment.start.mode, "x": segment.start.x.tolist()},
        "end": {"mode": segment.end.mode, "x": segment.end.x.tolist()},
        "events": events_to_json(segment),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")
