import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadmap import geometry as geo
from quadmap.errors import DegenerateConic, NotAnEllipsoid, ProjectionDegenerate
from quadmap.geometry import BBox, CameraView, DualQuadric, EllipsoidParams, PlaneH
from quadmap.selftest import oracle_roundtrip, oracle_tangency, random_camera_facing, random_ellipsoid

finite = st.floats(-5, 5, allow_nan=False)
axis = st.floats(0.3, 3.0)
angle = st.floats(-np.pi, np.pi)


@st.composite
def ellipsoids(draw, max_angle=np.pi):
    seed = draw(st.integers(0, 2**31))
    return random_ellipsoid(np.random.default_rng(seed), max_angle=max_angle)


@st.composite
def boxes(draw):
    x1, y1 = draw(finite), draw(finite)
    return BBox(x1, y1, x1 + draw(st.floats(0.1, 5)), y1 + draw(st.floats(0.1, 5)))


# --- value types -----------------------------------------------------------


def test_ellipsoid_rejects_bad_axes():
    with pytest.raises(ValueError):
        EllipsoidParams([1, 0, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        EllipsoidParams([1, np.inf, 1], [0, 0, 0])


def test_angles_wrapped_to_half_open_interval():
    e = EllipsoidParams([1, 1, 1], [0, 0, 0], [-np.pi, 3 * np.pi, 0.5])
    assert e.theta[0] == pytest.approx(np.pi)
    assert e.theta[1] == pytest.approx(np.pi)
    assert np.all(e.theta > -np.pi) and np.all(e.theta <= np.pi)


def test_bbox_rejects_degenerate():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox(0, 2, 1, 1)


def test_camera_view_invariants():
    K = np.diag([500.0, 500.0, 1.0])
    with pytest.raises(ValueError):
        CameraView.from_Rt(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraView.from_Rt(np.diag([-500.0, 500.0, 1.0]), np.eye(3), np.zeros(3))
    v = CameraView.from_Rt(K, np.eye(3), [1.0, 2.0, 3.0])
    assert np.allclose(v.P, K @ np.hstack([np.eye(3), [[1], [2], [3]]]))
    assert np.allclose(v.center, [-1, -2, -3])


def test_plane_rejects_zero_normal_and_normalizes():
    with pytest.raises(ValueError):
        PlaneH([0, 0, 0, 1])
    p = PlaneH([0, 0, 2, 4])
    # n . x = offset, so z = -2
    assert np.allclose(p.normal, [0, 0, 1]) and p.offset == pytest.approx(-2.0)


def test_dual_quadric_must_be_symmetric():
    Q = np.diag([1.0, 1.0, 1.0, -1.0])
    Q[0, 1] = 1e-3
    with pytest.raises(ValueError):
        DualQuadric(Q)


# --- compose / decompose ---------------------------------------------------


def test_unit_sphere_composes_to_identity_form():
    Q = geo.compose_dual_quadric(EllipsoidParams([1, 1, 1], [0, 0, 0]))
    assert np.array_equal(np.asarray(Q), np.diag([1.0, 1.0, 1.0, -1.0]))


@given(ellipsoids())
def test_block_identity(e):
    Q = np.asarray(geo.compose_dual_quadric(e))
    D = np.diag(e.a**2)
    assert Q[3, 3] == -1.0
    assert np.allclose(Q[:3, :3], e.R @ D @ e.R.T - np.outer(e.t, e.t), atol=1e-10, rtol=0)
    assert np.allclose(Q[:, 3], np.append(-e.t, -1.0), atol=1e-10, rtol=0)


@given(ellipsoids(max_angle=np.deg2rad(40)))
def test_roundtrip_near_identity_returns_same_parameters(e):
    back = geo.decompose_dual_quadric(geo.compose_dual_quadric(e))
    assert np.allclose(back.vector, e.vector, atol=1e-8)


@given(ellipsoids(), st.floats(0.01, 100))
def test_decompose_is_scale_invariant(e, lam):
    Q = np.asarray(geo.compose_dual_quadric(e))
    a = geo.decompose_dual_quadric(Q)
    b = geo.decompose_dual_quadric(-lam * Q)
    assert np.allclose(a.vector, b.vector, atol=1e-8)


def test_decompose_rejects_non_ellipsoids():
    with pytest.raises(NotAnEllipsoid):
        geo.decompose_dual_quadric(np.diag([1.0, 1.0, 1.0, 1.0]))
    with pytest.raises(NotAnEllipsoid):
        geo.decompose_dual_quadric(np.diag([1.0, -1.0, 1.0, -1.0]))
    with pytest.raises(NotAnEllipsoid):
        geo.decompose_dual_quadric(np.diag([1.0, 1.0, 1.0, 0.0]))


def test_canonical_frame_prefers_identity_for_axis_swap():
    # a 90 degree yaw with swapped axes is the same ellipsoid as no rotation
    e = EllipsoidParams([1.0, 2.0, 3.0], [0, 0, 0], [0.0, np.pi / 2, 0.0])
    back = geo.decompose_dual_quadric(geo.compose_dual_quadric(e))
    assert np.allclose(back.theta, 0, atol=1e-12)
    assert np.allclose(back.a, [3.0, 2.0, 1.0])


def test_roundtrip_oracle():
    r = oracle_roundtrip(n=1000)
    assert r.passed, r.line()


# --- projection ------------------------------------------------------------


def test_sphere_on_axis_projects_to_centred_square(front_view):
    e = EllipsoidParams([1, 1, 1], [0, -1.65, 0])
    box = geo.project_bbox(e, front_view)
    f, cx, cy = front_view.K[0, 0], front_view.K[0, 2], front_view.K[1, 2]
    # tangent ray to a unit sphere at distance 10 has slope 1/sqrt(99)
    half = f / np.sqrt(99.0)
    assert np.allclose(box.as_array(), [cx - half, cy - half, cx + half, cy + half], atol=1e-9)


@given(ellipsoids(), st.floats(1e-3, 1e3))
def test_projection_homogeneity(e, lam):
    rng = np.random.default_rng(0)
    view = random_camera_facing(rng, e)
    Q = np.asarray(geo.compose_dual_quadric(e))
    C1 = np.asarray(geo.project_quadric(lam * Q, view))
    C0 = np.asarray(geo.project_quadric(Q, view))
    assert np.allclose(C1, lam * C0, rtol=1e-12, atol=1e-12 * np.abs(C1).max())


@given(ellipsoids())
def test_tangency_closure(e):
    view = random_camera_facing(np.random.default_rng(1), e)
    try:
        box = geo.project_bbox(e, view)
    except ProjectionDegenerate:
        return
    Q = np.asarray(geo.compose_dual_quadric(e))
    scale = np.max(e.a) ** 2 + e.t @ e.t + view.center @ view.center
    for p in geo.backproject_bbox_planes(box, view):
        pi = np.asarray(p)
        assert abs(pi @ Q @ pi) / scale < 1e-8


def test_tangency_oracle():
    r = oracle_tangency(n=1000)
    assert r.passed, r.line()


def test_conic_bbox_rejects_hyperbola():
    with pytest.raises(DegenerateConic):
        geo.conic_bbox(np.diag([1.0, -1.0, -1.0]))


def test_project_bbox_rejects_ellipsoid_behind_camera(front_view):
    e = EllipsoidParams([1, 1, 1], [0, -1.65, -20])
    with pytest.raises(ProjectionDegenerate):
        geo.project_bbox(e, front_view)


def test_backprojected_planes_contain_camera_centre(front_view):
    box = BBox(100, 50, 300, 200)
    c = np.append(front_view.center, 1.0)
    for p in geo.backproject_bbox_planes(box, front_view):
        assert abs(np.asarray(p) @ c) < 1e-9


# --- IoU -------------------------------------------------------------------


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert geo.iou_2d(a, a) == 1.0
    assert geo.iou_2d(a, BBox(5, 5, 6, 6)) == 0.0
    assert geo.iou_2d(a, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    u, v = geo.iou_2d(a, b), geo.iou_2d(b, a)
    assert u == v
    assert 0.0 <= u <= 1.0
    if u == 1.0:
        assert np.allclose(a.as_array(), b.as_array(), rtol=1e-6)
