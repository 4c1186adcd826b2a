"""Sensitivity of the flow end point to the initial continuous state.

Between events the sensitivity follows the variational equation
``S' = A_q S`` (integrated with the same RK4 steps as the state); at a guard
crossing it is multiplied by the saltation matrix

    R_x + (f+ - R_x f-) g_x' / (g_x' f-),

which accounts for the crossing time moving with the initial state.  The
update is undefined when the flow is tangent to the guard; such traces are
flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import HybridSystem
from .simulate import SimConfig, TrajectorySegment, _simulate


class SensitivityError(RuntimeError):
    pass


@dataclass
class SensitivityTrace:
    segment: TrajectorySegment
    S_end: np.ndarray
    saltations: list[np.ndarray] = field(default_factory=list)
    valid: bool = True


def propagate(sys: HybridSystem, segment: TrajectorySegment, cfg: SimConfig) -> SensitivityTrace:
    """Recompute ``segment`` with the sensitivity matrix carried along."""
    if not segment.ok:
        raise SensitivityError(f"cannot propagate sensitivity over a {segment.status} segment")
    if segment.backward:
        raise SensitivityError("sensitivities are only defined for forward segments")
    replay, sens = _simulate(sys, segment.start, segment.duration, cfg, track=True)
    return SensitivityTrace(
        segment=replay,
        S_end=sens.matrix,
        saltations=sens.saltations,
        valid=not sens.grazing,
    )


def flow_with_sensitivity(sys: HybridSystem, start, t: float, cfg: SimConfig) -> SensitivityTrace:
    """Simulate forward and return the segment together with its sensitivity."""
    seg, sens = _simulate(sys, start, t, cfg, track=True)
    return SensitivityTrace(segment=seg, S_end=sens.matrix, saltations=sens.saltations,
                            valid=not sens.grazing)


def flow_time_derivative(sys: HybridSystem, segment: TrajectorySegment) -> np.ndarray:
    """dM/dt at the end of ``segment``: the vector field at the end point."""
    if not segment.ok:
        raise SensitivityError(f"segment status is {segment.status}")
    return sys[segment.end.mode].field(segment.end.x)
