"""Hybrid systems with affine per-mode dynamics, box domains and affine guards.

A system is a set of named modes.  Each mode carries its vector field
``f(x) = A x + b``, an axis-aligned box of admissible continuous states and
a list of guard surfaces.  A guard surface fires when its affine level
function ``g(x) = a.x + offset`` becomes nonnegative; the state is then mapped
through the affine reset ``x -> M x + c`` into the surface's target mode.

All types are immutable once built (arrays are flagged read-only) so they
can be shared freely between simulations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_TAG = "hybrid-falsify/1"


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class State:
    """A hybrid state: a mode name and a continuous vector."""

    mode: str
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, 1))

    def __eq__(self, other):
        if not isinstance(other, State):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.x, other.x)

    def __hash__(self):
        return hash((self.mode, self.x.tobytes()))

    def __repr__(self):
        return f"State({self.mode!r}, {np.array2string(self.x, precision=6)})"


@dataclass(frozen=True, eq=False)
class GuardSurface:
    normal: np.ndarray
    offset: float
    target: str
    reset_matrix: np.ndarray
    reset_offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(self.normal, 1))
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "reset_matrix", _frozen(self.reset_matrix, 2))
        object.__setattr__(self, "reset_offset", _frozen(self.reset_offset, 1))

    def level(self, x: np.ndarray) -> float:
        return float(self.normal @ x + self.offset)

    def reset(self, x: np.ndarray) -> np.ndarray:
        return self.reset_matrix @ x + self.reset_offset


@dataclass(frozen=True, eq=False)
class Mode:
    name: str
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    guards: tuple[GuardSurface, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 2))
        object.__setattr__(self, "b", _frozen(self.b, 1))
        object.__setattr__(self, "lower", _frozen(self.lower, 1))
        object.__setattr__(self, "upper", _frozen(self.upper, 1))
        object.__setattr__(self, "guards", tuple(self.guards))

    def field(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the vector field at ``x``."""
        return self.A @ x + self.b

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass(frozen=True, eq=False)
class HybridSystem:
    modes: dict[str, Mode]
    state_dim: int

    def __post_init__(self):
        object.__setattr__(self, "modes", dict(self.modes))

    def __getitem__(self, name: str) -> Mode:
        return self.modes[name]

    @property
    def mode_names(self) -> list[str]:
        return list(self.modes)

    def in_domain(self, s: State, tol: float = 0.0) -> bool:
        mode = self.modes.get(s.mode)
        return mode is not None and mode.contains(s.x, tol)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """``{(q, x) : q == center.mode and (x-c)' shape (x-c) <= 1}``."""

    center: State
    shape: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = _frozen(self.shape, 2)
        n = self.center.x.size
        if shape.shape != (n, n):
            raise ValueError(f"shape matrix must be {n}x{n}, got {shape.shape}")
        if not np.allclose(shape, shape.T, rtol=0.0, atol=1e-12):
            raise ValueError("shape matrix is not symmetric")
        try:
            chol = np.linalg.cholesky(shape)
        except np.linalg.LinAlgError as exc:
            raise ValueError("shape matrix is not positive definite") from exc
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "_chol", chol)

    def quadratic(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=float) - self.center.x
        return float(d @ self.shape @ d)

    def contains(self, s: State) -> bool:
        return membership(self, s)

    def semi_axes(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.shape))


@dataclass(frozen=True, eq=False)
class Problem:
    system: HybridSystem
    init: Ellipsoid
    unsafe: Ellipsoid

    def __post_init__(self):
        for label, ell in (("init", self.init), ("unsafe", self.unsafe)):
            if not self.system.in_domain(ell.center, tol=1e-12):
                raise ValueError(f"{label} center {ell.center} is outside its mode domain")


def membership(e: Ellipsoid, s: State) -> bool:
    """Return True iff ``s`` lies in the ellipsoid ``e`` (mode must match)."""
    if s.x.shape != e.center.x.shape:
        raise ValueError(f"dimension mismatch: {s.x.shape} vs {e.center.x.shape}")
    if s.mode != e.center.mode:
        return False
    return e.quadratic(s.x) <= 1.0


def validate(sys: HybridSystem) -> list[str]:
    """Check the structural invariants of ``sys``.

    Returns one human-readable diagnostic per violation; an empty list means
    the system is well formed.
    """
    problems = []
    n = sys.state_dim
    for name, mode in sys.modes.items():
        if mode.name != name:
            problems.append(f"mode key {name!r} does not match mode name {mode.name!r}")
        if mode.A.shape != (n, n):
            problems.append(f"mode {name}: A has shape {mode.A.shape}, expected {(n, n)}")
        if mode.b.shape != (n,):
            problems.append(f"mode {name}: b has shape {mode.b.shape}, expected {(n,)}")
        if mode.lower.shape != (n,) or mode.upper.shape != (n,):
            problems.append(f"mode {name}: domain bounds must have length {n}")
        elif np.any(mode.lower > mode.upper):
            problems.append(f"mode {name}: empty domain box")
        for k, g in enumerate(mode.guards):
            where = f"mode {name} guard {k}"
            if g.target not in sys.modes:
                problems.append(f"{where}: unknown target mode {g.target!r}")
            if g.normal.shape != (n,):
                problems.append(f"{where}: normal has shape {g.normal.shape}, expected {(n,)}")
            elif not np.any(g.normal != 0.0):
                problems.append(f"{where}: level function has zero gradient")
            if g.reset_matrix.shape != (n, n) or g.reset_offset.shape != (n,):
                problems.append(f"{where}: reset has wrong dimensions")
    return problems


# -- serialization -----------------------------------------------------------

_TOP_KEYS = {"format", "state_dim", "modes", "init", "unsafe"}
_MODE_KEYS = {"name", "A", "b", "lower", "upper", "guards"}
_GUARD_KEYS = {"normal", "offset", "target", "reset_matrix", "reset_offset"}
_ELLIPSOID_KEYS = {"mode", "center", "shape"}


class ModelFormatError(ValueError):
    pass


def _check_keys(obj: Any, allowed: set[str], required: set[str], where: str):
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ModelFormatError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ModelFormatError(f"{where}: missing keys {sorted(missing)}")


def system_to_dict(sys: HybridSystem) -> dict:
    modes = []
    for mode in sys.modes.values():
        modes.append({
            "name": mode.name,
            "A": mode.A.tolist(),
            "b": mode.b.tolist(),
            "lower": mode.lower.tolist(),
            "upper": mode.upper.tolist(),
            "guards": [
                {
                    "normal": g.normal.tolist(),
                    "offset": g.offset,
                    "target": g.target,
                    "reset_matrix": g.reset_matrix.tolist(),
                    "reset_offset": g.reset_offset.tolist(),
                }
                for g in mode.guards
            ],
        })
    return {"state_dim": sys.state_dim, "modes": modes}


def _ellipsoid_to_dict(e: Ellipsoid) -> dict:
    return {"mode": e.center.mode, "center": e.center.x.tolist(), "shape": e.shape.tolist()}


def problem_to_dict(problem: Problem) -> dict:
    out = {"format": FORMAT_TAG}
    out.update(system_to_dict(problem.system))
    out["init"] = _ellipsoid_to_dict(problem.init)
    out["unsafe"] = _ellipsoid_to_dict(problem.unsafe)
    return out


def system_from_dict(data: dict) -> HybridSystem:
    _check_keys(data, _TOP_KEYS, {"state_dim", "modes"}, "model")
    modes = {}
    for i, m in enumerate(data["modes"]):
        _check_keys(m, _MODE_KEYS, _MODE_KEYS - {"guards"}, f"modes[{i}]")
        guards = []
        for k, g in enumerate(m.get("guards", [])):
            _check_keys(g, _GUARD_KEYS, _GUARD_KEYS, f"modes[{i}].guards[{k}]")
            guards.append(GuardSurface(**g))
        if m["name"] in modes:
            raise ModelFormatError(f"duplicate mode name {m['name']!r}")
        modes[m["name"]] = Mode(
            name=m["name"], A=m["A"], b=m["b"], lower=m["lower"], upper=m["upper"],
            guards=tuple(guards),
        )
    return HybridSystem(modes=modes, state_dim=int(data["state_dim"]))


def _ellipsoid_from_dict(data: dict, where: str) -> Ellipsoid:
    _check_keys(data, _ELLIPSOID_KEYS, _ELLIPSOID_KEYS, where)
    return Ellipsoid(State(data["mode"], data["center"]), data["shape"])


def problem_from_dict(data: dict) -> Problem:
    _check_keys(data, _TOP_KEYS, _TOP_KEYS - {"format"}, "model")
    if data.get("format", FORMAT_TAG) != FORMAT_TAG:
        raise ModelFormatError(f"unsupported format tag {data['format']!r}")
    sys = system_from_dict({k: data[k] for k in ("state_dim", "modes")})
    diagnostics = validate(sys)
    if diagnostics:
        raise ModelFormatError("invalid system: " + "; ".join(diagnostics))
    return Problem(
        system=sys,
        init=_ellipsoid_from_dict(data["init"], "init"),
        unsafe=_ellipsoid_from_dict(data["unsafe"], "unsafe"),
    )


def dump_problem(problem: Problem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=1) + "\n")


def load_problem(path) -> Problem:
    return problem_from_dict(json.loads(Path(path).read_text()))
