"""Distances between stored states and the cost of paths through the store.

Two flavours of terminal distance are used.  The graph search measures the
plain Euclidean distance from a state to the Init/Unsafe ellipsoid (zero
inside, infinite in another mode).  Local search instead uses the smooth
penalty ``(x - c)' E (x - c)`` to the ellipsoid centre.  Gap distances between
consecutive unrelated states are Euclidean and multiplied by the gap weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .model import Ellipsoid, State

INF = math.inf
RELATED = "related"
GAP = "gap"


@dataclass(frozen=True)
class CostWeights:
    omega: float = 500.0
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class CostBreakdown:
    init: float
    gaps: list[float]
    unsafe: float
    total: float

    def to_dict(self) -> dict:
        return {"init": self.init, "gaps": list(self.gaps), "unsafe": self.unsafe, "total": self.total}


@dataclass
class PathCandidate:
    """A sequence of stored states joined by relation edges or gaps.

    ``witnesses[k]`` is the chain of simulated segments that justifies a
    related edge ``k`` (state ``k`` to ``k+1``); it is ``None`` for gaps.
    """

    states: list[State]
    ids: list[int]
    edge_kinds: list[str]
    witnesses: list[list | None]
    breakdown: CostBreakdown | None = None

    @property
    def total(self) -> float:
        return self.breakdown.total if self.breakdown is not None else INF

    @property
    def segment_durations(self) -> list[float]:
        return [sum(w.duration for w in chain) for chain in self.witnesses if chain is not None]

    def __len__(self):
        return len(self.states)

    def is_alternating(self) -> bool:
        """Related edges sit exactly at the odd positions (1-based)."""
        return all((k % 2 == 0) == (kind == RELATED) for k, kind in enumerate(self.edge_kinds))


def row_norms(D: np.ndarray) -> np.ndarray:
    """Euclidean norms of the rows of ``D``, summed in a fixed column order.

    Every distance in this package goes through here so that the same pair of
    states always yields bit-identical values.
    """
    D = np.atleast_2d(D)
    acc = D[:, 0] * D[:, 0]
    for k in range(1, D.shape[1]):
        acc = acc + D[:, k] * D[:, k]
    return np.sqrt(acc)


def euclid(a: np.ndarray, b: np.ndarray) -> float:
    return float(row_norms(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))[0])


def ellipsoid_distance(e: Ellipsoid, x: np.ndarray) -> float:
    """Euclidean distance from ``x`` to the solid ellipsoid (continuous part)."""
    x = np.asarray(x, dtype=float)
    if e.quadratic(x) <= 1.0:
        return 0.0
    lam, Q = np.linalg.eigh(e.shape)
    z = Q.T @ (x - e.center.x)

    # the closest point is c + Q (z / (1 + mu lam)) for the mu >= 0 putting it on the surface
    def excess(mu):
        y = z / (1.0 + mu * lam)
        return float(np.sum(lam * y * y)) - 1.0

    hi = 1.0
    while excess(hi) > 0.0:
        hi *= 2.0
    mu = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    y = z / (1.0 + mu * lam)
    return euclid(z, y)


def dist_to_set(e: Ellipsoid, p: State, form: str = "graph") -> float:
    """Distance of ``p`` to the ellipsoid ``e``.

    ``graph``: Euclidean distance to the set, ``inf`` in another mode.
    ``penalty``: the squared weighted norm ``(x-c)' E (x-c)`` to the centre.
    """
    if form == "penalty":
        return e.quadratic(p.x)
    if form != "graph":
        raise ValueError(f"unknown distance form {form!r}")
    if p.mode != e.center.mode:
        return INF
    return ellipsoid_distance(e, p.x)


def dist_init(init: Ellipsoid, p: State, form: str = "graph") -> float:
    return dist_to_set(init, p, form)


def dist_unsafe(unsafe: Ellipsoid, p: State, form: str = "graph") -> float:
    return dist_to_set(unsafe, p, form)


def state_distance(store, i: int, j: int) -> float:
    """Distance from stored point ``i`` to stored point ``j``.

    Zero when ``i -> j`` is recorded, the Euclidean distance within a mode,
    infinite across modes.  Not symmetric.
    """
    if store.related(i, j):
        return 0.0
    p, q = store.points[i], store.points[j]
    if p.mode != q.mode:
        return INF
    return euclid(p.x, q.x)


def path_cost(store, weights: CostWeights, path) -> CostBreakdown:
    """Cost of a path given as stored point ids or as a :class:`PathCandidate`.

    ``d_I(p_1) + omega * sum(gaps) + d_U(p_n)``, summed left to right.  For a
    candidate, its own edge kinds decide which edges are related (they may
    be compositions that the store does not hold directly).
    """
    if isinstance(path, PathCandidate):
        ids = path.ids
        states = path.states
        kinds = path.edge_kinds
    else:
        ids = list(path)
        states = [store.points[i] for i in ids]
        kinds = None
    if not states:
        raise ValueError("empty path")
    d_i = store.d_init_of(states[0])
    total = d_i
    gaps = []
    for k in range(len(states) - 1):
        if kinds is not None:
            related = kinds[k] == RELATED
        else:
            related = store.related(ids[k], ids[k + 1])
        if related:
            w = 0.0
        elif states[k].mode != states[k + 1].mode:
            w = INF
        else:
            w = weights.omega * euclid(states[k].x, states[k + 1].x)
        gaps.append(w)
        total = total + w
    d_u = store.d_unsafe_of(states[-1])
    total = total + d_u
    return CostBreakdown(init=d_i, gaps=gaps, unsafe=d_u, total=total)


def normalize(path: PathCandidate, store=None, weights: CostWeights | None = None,
              duplicate: bool = False) -> PathCandidate:
    """Bring a path into alternating form.

    Solitary states (no related edge to either neighbour) are dropped; a run
    of related edges is joined into one edge whose witness is the
    concatenated chain, or, with ``duplicate=True``, split by repeating the
    inner state so that a zero-length gap separates the two trajectories.
    When nothing is related the first state alone is kept.
    """
    states, ids = list(path.states), list(path.ids)
    kinds, wits = list(path.edge_kinds), list(path.witnesses)
    m = len(states)
    if m == 0:
        return path
    rel = [k == RELATED for k in kinds]
    keep = [(i > 0 and rel[i - 1]) or (i < m - 1 and rel[i]) for i in range(m)]
    if not any(keep):
        out = PathCandidate([states[0]], [ids[0]], [], [])
    else:
        n_states, n_ids, n_kinds, n_wits = [], [], [], []
        last = None
        for i in range(m):
            if not keep[i]:
                continue
            if last is not None:
                if last == i - 1:
                    n_kinds.append(kinds[last])
                    n_wits.append(wits[last])
                else:
                    n_kinds.append(GAP)
                    n_wits.append(None)
            n_states.append(states[i])
            n_ids.append(ids[i])
            last = i
        out = _fold_related_runs(n_states, n_ids, n_kinds, n_wits, duplicate)
    if store is not None and weights is not None:
        out.breakdown = path_cost(store, weights, out)
    return out


def _fold_related_runs(states, ids, kinds, wits, duplicate):
    o_states, o_ids, o_kinds, o_wits = [states[0]], [ids[0]], [], []
    for k, kind in enumerate(kinds):
        nxt_state, nxt_id = states[k + 1], ids[k + 1]
        prev_related = bool(o_kinds) and o_kinds[-1] == RELATED
        if kind == RELATED and prev_related:
            if duplicate:
                o_kinds.append(GAP)
                o_wits.append(None)
                o_states.append(o_states[-1])
                o_ids.append(o_ids[-1])
                o_kinds.append(RELATED)
                o_wits.append(list(wits[k]))
            else:
                o_wits[-1] = o_wits[-1] + list(wits[k])
                o_states[-1] = nxt_state
                o_ids[-1] = nxt_id
                continue
        else:
            o_kinds.append(kind)
            o_wits.append(list(wits[k]) if wits[k] is not None else None)
        o_states.append(nxt_state)
        o_ids.append(nxt_id)
    return PathCandidate(o_states, o_ids, o_kinds, o_wits)


def gap_sum(states_a: Sequence[State], states_b: Sequence[State]) -> float:
    """Sum of Euclidean gaps between paired states (continuous parts only)."""
    return float(sum(euclid(a.x, b.x) for a, b in zip(states_a, states_b)))
