import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiorecon.errors import DegenerateProjectionError, IllConditionedError, InvalidInputError
from angiorecon.geometry import (PointCorrespondence, ViewGeometry, lm_step, project, projection_from_geometry,
                                 refine_calibration, source_and_detector, triangulate)

from conftest import make_view


def ray_plane_projection(g, p):
    """Independent projection: intersect the source ray with the detector plane."""
    s, c, eu, ev = source_and_detector(g)
    n = (c - s) / np.linalg.norm(c - s)
    d = p - s
    t = ((c - s) @ n) / (d @ n)
    hit = s + t * d
    u0 = g.principal_point[0] + g.detector_shift[0]
    v0 = g.principal_point[1] + g.detector_shift[1]
    return np.array([u0 + (hit - c) @ eu / g.pixel_spacing, v0 + (hit - c) @ ev / g.pixel_spacing])


def test_isocenter_projects_to_principal_point():
    g = make_view()
    uv = project(projection_from_geometry(g), np.zeros(3))
    assert np.array_equal(uv, np.array(g.principal_point))


def test_magnification_offset_matches_ray_plane_oracle():
    g = make_view()
    op = projection_from_geometry(g)
    x = 0.5
    uv = project(op, np.array([x, 0.0, 0.0]))
    assert uv[0] - g.principal_point[0] == pytest.approx(x * g.sid / g.sod / g.pixel_spacing, rel=1e-12)
    assert np.allclose(uv, ray_plane_projection(g, np.array([x, 0.0, 0.0])), atol=1e-9)


@given(st.floats(-60, 60), st.floats(-30, 30), st.lists(st.floats(-50, 50), min_size=3, max_size=3),
       st.floats(-10, 10), st.floats(-10, 10))
def test_projection_agrees_with_ray_plane_intersection(a, b, p, du, dv):
    g = make_view(a, b, shift=(du, dv))
    p = np.array(p)
    assert np.allclose(project(projection_from_geometry(g), p), ray_plane_projection(g, p), atol=1e-8)


def test_orthogonal_sources():
    s0 = source_and_detector(make_view(0, 0))[0]
    s90 = source_and_detector(make_view(90, 0))[0]
    assert abs(s0 @ s90) / (np.linalg.norm(s0) * np.linalg.norm(s90)) < 1e-15


def test_source_is_point_at_infinity():
    op = projection_from_geometry(make_view(25, -10))
    hom = op.matrix @ np.append(op.source_position, 1.0)
    assert abs(hom[2]) < 1e-9
    with pytest.raises(DegenerateProjectionError):
        project(op, op.source_position)
    assert np.linalg.matrix_rank(op.matrix[:, :3]) == 3


@given(st.floats(0.1, 100))
def test_homogeneous_scale_invariance(lam):
    ga, gb = make_view(30, 0), make_view(-30, 20)
    oa, ob = projection_from_geometry(ga), projection_from_geometry(gb)
    p = np.array([3.0, -7.0, 12.0])
    assert np.allclose(project(oa.scaled(lam), p), project(oa, p), atol=1e-9)
    x1, _ = triangulate(oa.scaled(lam), ob.scaled(-lam), project(oa, p), project(ob, p))
    assert np.allclose(x1, p, atol=1e-9)


def test_round_trip_and_symmetry(rng):
    oa = projection_from_geometry(make_view(30, 0))
    ob = projection_from_geometry(make_view(-30, 20))
    for p in rng.uniform(-50, 50, size=(50, 3)):
        pa, pb = project(oa, p), project(ob, p)
        x, res = triangulate(oa, ob, pa, pb)
        assert np.linalg.norm(x - p) < 1e-9 and res < 1e-9
        y, res2 = triangulate(ob, oa, pb, pa)
        assert np.max(np.abs(x - y)) <= 1e-12 and res == res2


def test_principal_rays_meet_at_isocenter():
    ga, gb = make_view(0, 0), make_view(90, 0)
    x, res = triangulate(projection_from_geometry(ga), projection_from_geometry(gb), ga.principal_point,
                         gb.principal_point)
    assert np.linalg.norm(x) < 1e-9 and res < 1e-9


def test_pixel_perturbation_is_continuous():
    oa = projection_from_geometry(make_view(30, 0))
    ob = projection_from_geometry(make_view(-30, 20))
    p = np.array([1.0, 2.0, 3.0])
    pa, pb = project(oa, p), project(ob, p)
    x1, r1 = triangulate(oa, ob, pa, pb + np.array([1.0, 0.0]))
    assert r1 > 0
    # one pixel is 0.3 mm on the detector, i.e. 0.225 mm at the isocenter; the
    # midpoint moves by at most that over the sine of the inter-view angle
    assert np.linalg.norm(x1 - p) < 0.225 / math.sin(math.radians(30))
    xs = [triangulate(oa, ob, pa, pb + np.array([e, 0.0]))[0] for e in (1e-3, 2e-3)]
    assert np.linalg.norm(xs[1] - xs[0]) == pytest.approx(np.linalg.norm(xs[0] - p), rel=1e-3)


def test_parallel_rays_rejected():
    g = make_view(0, 0)
    g2 = make_view(180, 0)
    oa, ob = projection_from_geometry(g), projection_from_geometry(g2)
    with pytest.raises(IllConditionedError):
        triangulate(oa, ob, g.principal_point, g2.principal_point)


def test_same_view_rejected():
    op = projection_from_geometry(make_view())
    with pytest.raises(InvalidInputError):
        triangulate(op, op, (0, 0), (1, 1))


def test_geometry_validation():
    with pytest.raises(InvalidInputError):
        make_view(sid=700, sod=750)
    with pytest.raises(InvalidInputError):
        make_view(spacing=0.0)
    doc = make_view().to_json()
    doc["pixel_spacing_mm"] = [0.3, 0.4]
    with pytest.raises(InvalidInputError):
        ViewGeometry.from_json(doc)
    assert ViewGeometry.from_json(make_view(12, 3, shift=(1, 2)).to_json()) == make_view(12, 3, shift=(1, 2))


def _corr(ga, gb, pts):
    oa, ob = projection_from_geometry(ga), projection_from_geometry(gb)
    return [PointCorrespondence(tuple(project(oa, p)), tuple(project(ob, p)), lab)
            for p, lab in zip(pts, ("start", "end"))]


PTS = (np.array([-10.0, 5.0, -15.0]), np.array([8.0, -4.0, 20.0]))


def test_consistent_correspondences_are_a_fixed_point():
    ga, gb = make_view(30, 0), make_view(-30, 20)
    res = refine_calibration(ga, gb, _corr(ga, gb, PTS))
    assert res.initial_cost < 1e-20
    assert res.geometry_a.detector_shift == ga.detector_shift
    assert res.geometry_b.detector_shift == gb.detector_shift


def test_known_shift_recovered():
    ga, gb = make_view(30, 0), make_view(-30, 20)
    corr = _corr(ga.with_shift((3.0, -2.0)), gb, PTS)
    res = refine_calibration(ga, gb, corr, views=("a",))
    assert np.allclose(res.geometry_a.detector_shift, (3.0, -2.0), atol=0.01)
    assert res.final_cost <= res.initial_cost
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_lm_large_damping_is_gradient_descent():
    rng = np.random.default_rng(0)
    jac = rng.normal(size=(6, 4))
    r = rng.normal(size=6)
    lam = 1e12
    step = lm_step(jac, r, lam)
    assert np.allclose(step * lam, -jac.T @ r, rtol=1e-6)


def test_calibration_input_errors():
    ga, gb = make_view(30, 0), make_view(-30, 20)
    c = _corr(ga, gb, PTS)
    with pytest.raises(InvalidInputError):
        refine_calibration(ga, gb, c[:1])
    with pytest.raises(InvalidInputError):
        refine_calibration(ga, gb, [c[0], c[0]])
    with pytest.raises(InvalidInputError):
        PointCorrespondence((0, 0), (1, 1), "middle")
