import numpy as np
import pytest

from hybrid_falsify.model import validate
from hybrid_falsify.navigation import (
    LABELS, NavigationSpec, TOY_KINDS, build_navigation, build_toy, cell_name, drift,
)
from hybrid_falsify.simulate import SimConfig, flow


def test_drift_values():
    assert np.allclose(drift(4), [0.0, -1.0])
    assert np.allclose(drift(1), [np.sqrt(2) / 2, np.sqrt(2) / 2])
    assert np.allclose(drift(0), [0.0, 1.0])
    assert np.allclose(drift(6), [-1.0, 0.0])


def test_label_matrix():
    assert LABELS == ((4, 3, 3, 4), (4, 4, 4, 4), (4, 6, 6, 4), (1, 0, 7, 6))


def test_mode_and_guard_counts():
    sys = build_navigation().system
    assert len(sys.modes) == 16
    assert sum(len(m.guards) for m in sys.modes.values()) == 48


def test_each_interior_face_has_one_surface_per_direction():
    sys = build_navigation().system
    pairs = [(name, g.target) for name, m in sys.modes.items() for g in m.guards]
    assert len(set(pairs)) == 48
    assert all((b, a) in pairs for a, b in pairs)


def test_cell_geometry_and_drift_per_cell():
    sys = build_navigation().system
    for i in range(1, 5):
        for j in range(1, 5):
            m = sys[cell_name(i, j)]
            assert np.allclose(m.lower[:2], [j - 1, 4 - i])
            assert np.allclose(m.upper[:2], [j, 5 - i])
            u = drift(LABELS[i - 1][j - 1])
            # the velocity equilibrium of each cell is its desired direction
            x = np.array([j - 0.5, 4.5 - i, *u])
            assert np.allclose(m.field(x)[2:], 0.0, atol=1e-12)
            assert np.allclose(m.field(x)[:2], u)


def test_position_rows():
    for m in build_navigation().system.modes.values():
        assert np.array_equal(m.A[0], [0, 0, 1, 0]) and np.array_equal(m.A[1], [0, 0, 0, 1])
        assert np.array_equal(m.b[:2], [0, 0])


def test_init_and_unsafe():
    prob = build_navigation()
    assert prob.init.center.mode == "cell_1_1"
    assert prob.unsafe.center.mode == "cell_3_4"
    assert np.allclose(prob.init.center.x, [0.5, 3.5, 0, 0])
    assert np.allclose(prob.unsafe.center.x, [3.5, 1.5, 0, 0])
    assert np.allclose(sorted(prob.init.semi_axes()), [0.2, 0.2, 2.0, 2.0])


def test_full_axis_reading():
    prob = build_navigation(NavigationSpec(full_axes=True))
    assert np.allclose(np.diag(prob.unsafe.shape), [100, 100, 1, 1])


def test_identity_resets():
    for m in build_navigation().system.modes.values():
        for g in m.guards:
            assert np.array_equal(g.reset_matrix, np.eye(4)) and not g.reset_offset.any()


@pytest.mark.parametrize("kind", TOY_KINDS)
def test_toys_valid(kind):
    assert validate(build_toy(kind).system) == []


def test_unknown_toy():
    with pytest.raises(ValueError):
        build_toy("nope")


def test_grazing_toy_is_tangent():
    prob = build_toy("grazing")
    mode = prob.system["A"]
    g = mode.guards[0]
    # the path from (-1, 0.5) peaks at x2 = 1 when x1 = 0
    x_touch = np.array([0.0, 1.0])
    assert abs(g.normal @ mode.field(x_touch)) < 1e-6 * np.linalg.norm(mode.field(x_touch))


def test_corridor_needs_long_trajectories():
    prob = build_toy("corridor")
    seg = flow(prob.system, prob.init.center, 13.0, SimConfig())
    assert seg.end.mode == "C" and abs(seg.end.x[0] - 7.0) < 1e-9
