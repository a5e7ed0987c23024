import math

import numpy as np
import pytest

from eskin.config import DeformationConfig, GeometryConfig
from eskin.geometry import (
    NO_TOUCH,
    InflationState,
    ManipulatorGeometry,
    TouchSpec,
    bump_amplitude,
    bump_volume,
    deform,
    subregion_of,
    subregions_adjacent,
)


@pytest.fixture(scope="module")
def geom():
    return ManipulatorGeometry()


def constant_force(f):
    return lambda t: f


def polyline_length(p):
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def test_declared_dimensions(geom):
    assert geom.body_size == (50.0, 120.0)
    assert geom.skin_size == (40.0, 110.0)
    assert all((r[1] - r[0], r[3] - r[2]) == (40.0, 30.0) for r in geom.chamber_rects)
    assert geom.config.inlet_width == 1.5
    wires = geom.wires
    assert len(wires) == 8
    assert [w.face for w in wires].count("front") == 4
    assert sorted(w.length for w in wires[:4]) == [20.0, 45.0, 70.0, 95.0]
    assert all(w.width == 1.0 for w in wires)
    assert geom.marker_rest_positions.shape == (5, 3)


def test_wires_inside_skin(geom):
    x0, x1, y0, y1 = geom.skin_rect_world
    for w in geom.wires:
        c = w.centerline()
        assert np.all((c[:, 0] >= x0) & (c[:, 0] <= x1))
        assert np.all((c[:, 1] >= y0) & (c[:, 1] <= y1))


def test_subregion_examples(geom):
    assert subregion_of((20.0, 55.0), "front", geom) == 5
    assert subregion_of((0.0, 0.0), "front", geom) == 1
    assert subregion_of((0.0, 0.0), "back", geom) == 10
    # closed-low / open-high edges
    du, dv = 40.0 / 3, 110.0 / 3
    assert subregion_of((du, 0.0), "front", geom) == 2
    assert subregion_of((du - 1e-9, 0.0), "front", geom) == 1
    assert subregion_of((40.0, 110.0), "front", geom) == 9
    assert subregion_of((0.0, dv), "back", geom) == 13
    with pytest.raises(ValueError):
        subregion_of((41.0, 5.0), "front", geom)


def test_subregions_tile_each_face(geom):
    rng = np.random.default_rng(0)
    pts = rng.uniform([0, 0], [40, 110], (2000, 2))
    for face, offset in (("front", 0), ("back", 9)):
        idx = np.array([subregion_of(p, face, geom) for p in pts])
        assert set(idx) == set(range(1 + offset, 10 + offset))
        for k in range(1 + offset, 10 + offset):
            _, (u0, u1, v0, v1) = geom.subregion_rect(k)
            inside = (pts[:, 0] >= u0) & (pts[:, 0] < u1) & (pts[:, 1] >= v0) & (pts[:, 1] < v1)
            assert np.array_equal(inside, idx == k)


def test_adjacency():
    assert subregions_adjacent(1, 2) and subregions_adjacent(5, 8)
    assert not subregions_adjacent(1, 5)  # diagonal
    assert not subregions_adjacent(3, 4)  # row wrap
    assert not subregions_adjacent(1, 10)  # different faces
    assert subregions_adjacent(10, 13)


def test_reference_state_is_identity(geom):
    for t in (0.0, 3.7, 29.9):
        st = deform(geom, InflationState(), NO_TOUCH, t)
        np.testing.assert_array_equal(st.marker_positions, geom.marker_rest_positions)
        for w, path in zip(geom.wires, st.electrode_paths()):
            c = w.centerline()
            np.testing.assert_allclose(path[:, :2], c, atol=0)
            np.testing.assert_allclose(path[:, 2], geom.face_sign(w.face) * 15.0, atol=0)


def test_inflation_lengthens_wires_and_widens_gap(geom):
    rest = deform(geom, InflationState())
    inf = deform(geom, InflationState((20, 20, 20)))
    for i in range(4):
        assert polyline_length(inf.electrode_paths()[i]) > polyline_length(rest.electrode_paths()[i])
    # front-to-back gap at the middle of chamber 2
    gap_rest = rest.face_z(0.0, 60.0, "front") - rest.face_z(0.0, 60.0, "back")
    gap_inf = inf.face_z(0.0, 60.0, "front") - inf.face_z(0.0, 60.0, "back")
    assert gap_inf > gap_rest


@pytest.mark.parametrize("ml", [5.0, 10.0, 20.0])
def test_bump_volume_matches_injected(geom, ml):
    amp = bump_amplitude(ml, geom)
    both_faces = 2 * bump_volume(amp, geom)
    assert both_faces == pytest.approx(ml, rel=0.01)


def test_bump_volume_with_finite_compliance():
    mech = DeformationConfig(compliance_ml_per_kpa=0.5)
    g = ManipulatorGeometry(GeometryConfig(), mech)
    amp = bump_amplitude(20.0, g)
    gained = 2 * bump_volume(amp, g)
    # P_abs (V0 + dV) = P_atm (V0 + V_in) with P_abs = P_atm + dV / k, solved independently
    pa, v0, k = mech.atmospheric_kpa, mech.chamber_volume_ml, 0.5
    lo, hi = 0.0, 20.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if (pa + mid / k) * (v0 + mid) > pa * (v0 + 20.0):
            hi = mid
        else:
            lo = mid
    assert gained == pytest.approx(lo, rel=0.01)
    assert gained < 20.0


def test_touch_indentation_and_marker_motion(geom):
    # linear contact model: depth = k F with k = 1 mm/N
    _, center = geom.subregion_center(5)
    touch = TouchSpec(5, center, 8.0, constant_force(2.0))
    st = deform(geom, InflationState(), touch, 1.0)
    assert st.dent_depth == pytest.approx(1.0 * 2.0)
    cx, cy = st.contact_xy
    assert st.face_displacement(cx, cy, "front") == pytest.approx(-2.0)
    moved = np.linalg.norm(st.marker_positions - geom.marker_rest_positions, axis=1)
    assert moved.max() > 0
    # bending angle is c_bend * F
    assert abs(st.bend_angle) == pytest.approx(math.radians(2.0 * 2.0))


def test_marker_displacement_monotone_in_force(geom):
    _, center = geom.subregion_center(14)
    prev = -1.0
    for f in np.linspace(0.0, 3.0, 13):
        st = deform(geom, InflationState((10, 0, 20)), TouchSpec(14, center, 8.0, constant_force(f)))
        d = np.linalg.norm(st.marker_positions - geom.marker_rest_positions, axis=1).sum()
        assert d >= prev - 1e-12
        prev = d


def test_bend_unbend_round_trip(geom):
    _, center = geom.subregion_center(4)
    st = deform(geom, InflationState(), TouchSpec(4, center, 8.0, constant_force(2.5)))
    rng = np.random.default_rng(1)
    pts = rng.uniform([-25, 0, -15], [25, 120, 15], (500, 3))
    np.testing.assert_allclose(st.unbend(st.bend(pts)), pts, atol=1e-9)


def test_deform_is_deterministic(geom):
    _, center = geom.subregion_center(7)
    touch = TouchSpec(7, center, 8.0, constant_force(1.3))
    a = deform(geom, InflationState((10, 20, 0)), touch, 2.0)
    b = deform(geom, InflationState((10, 20, 0)), touch, 2.0)
    np.testing.assert_array_equal(a.marker_positions, b.marker_positions)
    for pa, pb in zip(a.electrode_paths(), b.electrode_paths()):
        np.testing.assert_array_equal(pa, pb)


def test_face_displacement_is_continuous(geom):
    st = deform(geom, InflationState((20, 20, 20)))
    xs = np.linspace(-25, 25, 2001)
    for y in (12.0, 25.0, 47.0, 60.0, 80.0):
        dz = st.face_displacement(xs, np.full_like(xs, y), "front")
        # a continuous profile has bounded jumps on a fine grid
        assert np.abs(np.diff(dz)).max() < 0.2


def test_deform_errors(geom):
    with pytest.raises(ValueError):
        deform(geom, InflationState((25, 0, 0)))
    with pytest.raises(ValueError):
        InflationState((-1, 0, 0))
    with pytest.raises(ValueError):
        deform(geom, InflationState(), NO_TOUCH, -1.0)
    # contact centre in sub-region 1 declared as sub-region 5
    with pytest.raises(ValueError):
        deform(geom, InflationState(), TouchSpec(5, (2.0, 2.0), 8.0, constant_force(1.0)))


def test_inside_body_carves_chamber_air(geom):
    st = deform(geom, InflationState())
    assert not st.inside_body(np.array([0.0, 25.0, 0.0]))  # chamber 1 centre
    assert st.inside_body(np.array([0.0, 25.0, 13.0]))  # silicone wall
    assert st.inside_body(np.array([0.0, 42.0, 0.0]))  # septum between chambers
    assert not st.inside_body(np.array([0.0, 25.0, 16.0]))  # outside
