"""The 16-mode Navigation benchmark and small closed-form test systems.

Navigation: a point mass on a 4x4 grid of unit cells.  Cell ``(i, j)`` (row
``i`` counted from the top, column ``j`` from the left, both 1-based) covers
``x1 in [j-1, j]``, ``x2 in [4-i, 5-i]``.  In each cell the velocity relaxes
toward a desired direction ``u(i, j) = (sin(pi C/4), cos(pi C/4))`` picked by
the cell label ``C(i, j)``::

    x1' = x3,  x2' = x4,  (x3, x4)' = A_v ((x3, x4) - u(i, j))

Shared cell faces carry guards with identity resets; outer walls carry none,
so running into a wall leaves the state space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Ellipsoid, GuardSurface, HybridSystem, Mode, Problem, State

LABELS = ((4, 3, 3, 4), (4, 4, 4, 4), (4, 6, 6, 4), (1, 0, 7, 6))
VELOCITY_MATRIX = ((-1.2, 0.1), (0.1, -1.2))


@dataclass(frozen=True)
class NavigationSpec:
    labels: tuple = LABELS
    velocity_matrix: tuple = VELOCITY_MATRIX
    velocity_bound: float = 2.0
    init_center: tuple = (0.5, 3.5, 0.0, 0.0)
    unsafe_center: tuple = (3.5, 1.5, 0.0, 0.0)
    axis_lengths: tuple = (0.2, 0.2, 2.0, 2.0)
    # axis_lengths are read as semi-axes; True halves them (full axis lengths)
    full_axes: bool = False

    @property
    def rows(self) -> int:
        return len(self.labels)

    @property
    def cols(self) -> int:
        return len(self.labels[0])


def cell_name(i: int, j: int) -> str:
    return f"cell_{i}_{j}"


def drift(label: int) -> np.ndarray:
    """Desired velocity for a cell label."""
    return np.array([np.sin(np.pi * label / 4.0), np.cos(np.pi * label / 4.0)])


def cell_of(spec: NavigationSpec, x1: float, x2: float) -> tuple[int, int]:
    j = min(max(int(np.floor(x1)) + 1, 1), spec.cols)
    i = min(max(spec.rows - int(np.floor(x2)), 1), spec.rows)
    return i, j


def _identity_guard(n: int, normal, offset: float, target: str) -> GuardSurface:
    return GuardSurface(normal=normal, offset=offset, target=target,
                        reset_matrix=np.eye(n), reset_offset=np.zeros(n))


def build_navigation_system(spec: NavigationSpec = NavigationSpec()) -> HybridSystem:
    Av = np.array(spec.velocity_matrix, dtype=float)
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    A[2:, 2:] = Av
    vb = spec.velocity_bound
    rows, cols = spec.rows, spec.cols
    modes = {}
    for i in range(1, rows + 1):
        for j in range(1, cols + 1):
            b = np.zeros(4)
            b[2:] = -Av @ drift(spec.labels[i - 1][j - 1])
            top = rows + 1 - i
            guards = []
            if j < cols:
                guards.append(_identity_guard(4, [1, 0, 0, 0], -float(j), cell_name(i, j + 1)))
            if j > 1:
                guards.append(_identity_guard(4, [-1, 0, 0, 0], float(j - 1), cell_name(i, j - 1)))
            if i > 1:
                guards.append(_identity_guard(4, [0, 1, 0, 0], -float(top), cell_name(i - 1, j)))
            if i < rows:
                guards.append(_identity_guard(4, [0, -1, 0, 0], float(top - 1), cell_name(i + 1, j)))
            name = cell_name(i, j)
            modes[name] = Mode(
                name=name, A=A, b=b,
                lower=[j - 1, top - 1, -vb, -vb],
                upper=[j, top, vb, vb],
                guards=tuple(guards),
            )
    return HybridSystem(modes=modes, state_dim=4)


def _ellipsoid(spec: NavigationSpec, center) -> Ellipsoid:
    lengths = np.asarray(spec.axis_lengths, dtype=float)
    semi = lengths / 2.0 if spec.full_axes else lengths
    i, j = cell_of(spec, center[0], center[1])
    return Ellipsoid(State(cell_name(i, j), center), np.diag(1.0 / semi ** 2))


def build_navigation(spec: NavigationSpec = NavigationSpec()) -> Problem:
    sys = build_navigation_system(spec)
    return Problem(system=sys, init=_ellipsoid(spec, spec.init_center),
                   unsafe=_ellipsoid(spec, spec.unsafe_center))


# -- toy systems --------------------------------------------------------------

GRAZE_OFFSET = 1e-13


def _ball(mode: str, center, radius: float) -> Ellipsoid:
    center = np.atleast_1d(np.asarray(center, dtype=float))
    return Ellipsoid(State(mode, center), np.eye(center.size) / radius ** 2)


def _line_guard(at: float, target: str, shift: float = 0.0) -> GuardSurface:
    return GuardSurface(normal=[1.0], offset=-at, target=target,
                        reset_matrix=[[1.0]], reset_offset=[shift])


def build_toy(kind: str) -> Problem:
    """Small systems with hand-computable behaviour.

    ``constant_1mode``  2-D, f = 0, unit balls around (0, 0) and (2, 0).
    ``exp_1mode``       1-D, f(x) = x.
    ``two_mode_line``   1-D; mode A on [0, 2] with x' = 1 jumps at x = 1 to
                        mode B via x -> x + 10, where x' = -1.
    ``grazing``         2-D, x1' = 1, x2' = -x1; from (-1, 0.5) the path
                        touches the guard x2 >= 1 - 1e-13 tangentially at t = 1.
    ``overlap``         2-D, f = 0, Init and Unsafe overlap.
    ``corridor``        1-D, x' = 0.5 through three modes [0,3], [3,6], [6,9];
                        Init near 0.5, Unsafe near 7.5, so every error
                        trajectory lasts longer than 13 time units.
    """
    if kind == "constant_1mode":
        m = Mode("A", np.zeros((2, 2)), np.zeros(2), [-5, -5], [5, 5])
        sys = HybridSystem({"A": m}, 2)
        return Problem(sys, _ball("A", [0, 0], 1.0), _ball("A", [2, 0], 1.0))
    if kind == "overlap":
        m = Mode("A", np.zeros((2, 2)), np.zeros(2), [-5, -5], [5, 5])
        sys = HybridSystem({"A": m}, 2)
        return Problem(sys, _ball("A", [0, 0], 1.0), _ball("A", [0.5, 0], 1.0))
    if kind == "exp_1mode":
        m = Mode("A", [[1.0]], [0.0], [-10.0], [10.0])
        sys = HybridSystem({"A": m}, 1)
        return Problem(sys, _ball("A", [1.0], 0.1), _ball("A", [5.0], 0.1))
    if kind == "two_mode_line":
        a = Mode("A", [[0.0]], [1.0], [0.0], [2.0], (_line_guard(1.0, "B", shift=10.0),))
        b = Mode("B", [[0.0]], [-1.0], [9.0], [20.0])
        sys = HybridSystem({"A": a, "B": b}, 1)
        return Problem(sys, _ball("A", [0.2], 0.1), _ball("B", [10.5], 0.1))
    if kind == "grazing":
        A = [[0.0, 0.0], [-1.0, 0.0]]
        g = GuardSurface(normal=[0.0, 1.0], offset=-(1.0 - GRAZE_OFFSET), target="B",
                         reset_matrix=np.eye(2), reset_offset=np.zeros(2))
        a = Mode("A", A, [1.0, 0.0], [-5.0, -5.0], [5.0, 1.0], (g,))
        b = Mode("B", A, [1.0, 0.0], [-5.0, -5.0], [5.0, 5.0])
        sys = HybridSystem({"A": a, "B": b}, 2)
        return Problem(sys, _ball("A", [-1.0, 0.5], 0.1), _ball("B", [1.0, 0.5], 0.1))
    if kind == "corridor":
        a = Mode("A", [[0.0]], [0.5], [0.0], [3.0], (_line_guard(3.0, "B"),))
        b = Mode("B", [[0.0]], [0.5], [3.0], [6.0], (_line_guard(6.0, "C"),))
        c = Mode("C", [[0.0]], [0.5], [6.0], [9.0])
        sys = HybridSystem({"A": a, "B": b, "C": c}, 1)
        return Problem(sys, _ball("A", [0.5], 0.1), _ball("C", [7.5], 0.1))
    raise ValueError(f"unknown toy kind {kind!r}")


TOY_KINDS = ("constant_1mode", "exp_1mode", "two_mode_line", "grazing", "overlap", "corridor")
