import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadmap import geometry as geo
from quadmap.assoc import (
    NEUTRAL,
    AssocConfig,
    DetectionInstance,
    KalmanBox,
    Mask,
    ObjectTrack,
    Tracker,
    affinity_iou,
    affinity_kalman,
    affinity_semantic,
    associate,
    bbox_to_z,
    brute_force_assignment,
    build_cost_matrix,
    center_drift,
    hungarian,
    z_to_bbox,
)
from quadmap.errors import ConfigError
from quadmap.geometry import BBox
from quadmap.scenarios import run_scenario
from quadmap.selftest import oracle_hungarian

costs = st.integers(1, 6).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda m: arrays(float, (n, m), elements=st.one_of(st.floats(0, 2.6), st.just(np.inf)))
    )
)


# --- masks and Kalman ------------------------------------------------------


def test_mask_polygon_contains_and_area():
    m = Mask(polygon=[[0, 0], [4, 0], [4, 2], [0, 2]])
    assert m.area == 8.0
    assert list(m.contains([[1, 1], [5, 1], [3.9, 1.9], [-0.1, 1]])) == [True, False, True, False]


def test_mask_raster_lookup():
    r = np.zeros((4, 6), dtype=bool)
    r[1:3, 2:5] = True
    m = Mask(raster=r)
    assert m.area == 6
    assert list(m.contains([[2.5, 1.5], [0.5, 0.5], [4.99, 2.99], [100, 100]])) == [True, False, True, False]


def test_mask_requires_exactly_one_form():
    with pytest.raises(ValueError):
        Mask()
    with pytest.raises(ValueError):
        Mask(polygon=[[0, 0], [1, 1]])


@given(st.floats(0, 100), st.floats(0, 100), st.floats(1, 50), st.floats(1, 50))
def test_box_state_roundtrip(x, y, w, h):
    b = BBox(x, y, x + w, y + h)
    assert np.allclose(z_to_bbox(bbox_to_z(b)).as_array(), b.as_array())


def test_kalman_tracks_constant_velocity():
    kf = KalmanBox(BBox(0, 0, 10, 10))
    for k in range(1, 30):
        kf.predict()
        kf.update(BBox(5 * k, 0, 5 * k + 10, 10))
    pred = kf.predict()
    assert pred.center == pytest.approx([5 * 30 + 5, 5], abs=0.5)
    assert np.allclose(kf.P, kf.P.T) and np.all(np.linalg.eigvalsh(kf.P) > 0)


# --- affinities ------------------------------------------------------------


def _det(box, **kw):
    return DetectionInstance(BBox(*box), "car", **kw)


def test_affinities_neutral_when_unavailable(front_view):
    trk = ObjectTrack(0, "car")
    d = _det((0, 0, 10, 10))
    assert affinity_semantic(trk, d) == NEUTRAL
    assert affinity_iou(trk, d, front_view) == NEUTRAL
    assert affinity_kalman(trk, d) == NEUTRAL


def test_semantic_affinity_counts_keypoints_outside_mask():
    trk = ObjectTrack(0, "car", last_mask=Mask.from_bbox(BBox(0, 0, 10, 10)))
    d = _det((0, 0, 10, 10), keypoints=[[1, 1], [2, 2], [3, 3], [20, 20]])
    assert affinity_semantic(trk, d) == pytest.approx(0.25)


def test_iou_affinity_from_projected_ellipsoid(car, front_view):
    trk = ObjectTrack(0, "car", ellipsoid=car)
    box = geo.project_bbox(car, front_view)
    assert affinity_iou(trk, DetectionInstance(box, "car"), front_view) == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 300), st.floats(1, 200), st.floats(1, 100)),
                min_size=1, max_size=4))
def test_costs_bounded_and_class_gated(boxes):
    cfg = AssocConfig()
    view = geo.CameraView.from_Rt(np.diag([700.0, 700.0, 1.0]), np.eye(3), [0, 0, 10])
    tracks = [ObjectTrack(i, "car" if i % 2 == 0 else "person", kalman=KalmanBox(BBox(x, y, x + w, y + h)))
              for i, (x, y, w, h) in enumerate(boxes)]
    for t in tracks:
        t.predicted = t.kalman.predict()
    dets = [DetectionInstance(BBox(x + 3, y, x + w + 3, y + h), "car") for x, y, w, h in boxes]
    C = build_cost_matrix(tracks, dets, view, cfg)
    for i, t in enumerate(tracks):
        if t.cls != "car":
            assert np.all(np.isinf(C[i]))
        else:
            assert np.all((C[i] >= 0) & (C[i] <= cfg.max_cost))


# --- assignment ------------------------------------------------------------


def test_hungarian_example():
    a = hungarian([[4, 1], [2, 8]])
    assert sorted(a.pairs) == [(0, 1), (1, 0)] and a.cost == 3


def test_hungarian_partial_with_forbidden():
    a = hungarian([[np.inf, np.inf], [1.0, 2.0], [0.5, np.inf]])
    assert sorted(a.pairs) == [(1, 1), (2, 0)]
    assert a.unmatched_rows == [0] and a.unmatched_cols == []


@given(costs)
def test_hungarian_equals_brute_force(C):
    h, b = hungarian(C), brute_force_assignment(C)
    assert len(h.pairs) == len(b.pairs)
    assert h.cost == pytest.approx(b.cost, abs=1e-9)


@given(costs, st.floats(0.1, 1.3), st.floats(0, 1.3))
def test_gate_monotonicity(C, g1, extra):
    g2 = min(g1 + extra, 2.6)
    n1 = len(hungarian(np.where(C <= g1, C, np.inf)).pairs)
    n2 = len(hungarian(np.where(C <= g2, C, np.inf)).pairs)
    assert n2 >= n1


def test_hungarian_oracle():
    r = oracle_hungarian(n=1000)
    assert r.passed, r.line()


# --- association step ------------------------------------------------------


def test_single_track_single_detection(front_view):
    tr = Tracker()
    d = _det((100, 100, 200, 150))
    res0 = tr.step([d], front_view)
    assert len(res0.new_tracks) == 1
    res1 = tr.step([_det((102, 100, 202, 150))], front_view)
    assert res1.matches == [(0, 0)] and res1.new_tracks == []
    assert len(tr.track(0).history) == 2


def test_unseen_class_spawns_track(front_view):
    tr = Tracker()
    tr.step([_det((100, 100, 200, 150))], front_view)
    res = tr.step([DetectionInstance(BBox(100, 100, 200, 150), "person")], front_view)
    assert res.matches == [] and len(res.new_tracks) == 1
    assert res.lost_tracks == [0]


def test_association_is_deterministic(front_view):
    def run():
        tr = Tracker()
        out = []
        for k in range(4):
            dets = [_det((100 + 5 * k, 100, 200 + 5 * k, 150)), _det((300 - 5 * k, 90, 380 - 5 * k, 140))]
            out.append(tr.step(dets, front_view).matches)
        return out

    assert run() == run()


def test_config_validation():
    with pytest.raises(ConfigError):
        AssocConfig(gate=5.0)
    with pytest.raises(ConfigError):
        AssocConfig.from_dict({"bogus": 1})
    assert AssocConfig().new_track_threshold == AssocConfig().gate


def test_static_point_has_no_drift(car):
    from conftest import arc_views

    views = arc_views(car.t)
    hist = [(v, geo.project_bbox(car, v)) for v in views]
    assert center_drift(hist) < 10.0


# --- scripted scenarios ----------------------------------------------------


def test_crossing_keeps_identities():
    _, result, rep = run_scenario("crossing", seed=0)
    assert rep["identity_preserved"], rep
    assert rep["mapped_objects"] == [0, 1]
    assert all(t.success for t in result.trials)


def test_dynamic_object_is_flagged_and_excluded():
    _, result, rep = run_scenario("dynamic", seed=0)
    assert rep["identity_preserved"]
    assert rep["dynamic_flagged"] == [1] and rep["dynamic_excluded"]
    assert rep["mapped_objects"] == [0]
    assert [o.dynamic for o in result.objects] == [False, True]
