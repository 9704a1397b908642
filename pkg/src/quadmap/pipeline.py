"""Offline object mapping over a DetectionLog.

Per keyframe: associate detections with tracks, re-initialize every touched
track that has enough views from all of its observations, optionally refine
it, and finally score the map against the log's GT objects.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry as geo
from .assoc import AssocConfig, ObjectTrack, Tracker
from .errors import ConfigError, InitFailure, ProjectionDegenerate
from .geometry import CameraView, EllipsoidParams
from .initialize import METHODS, InitConfig, ObservationSet
from .logio import DetectionLog, LogDetection
from .optimize import ObjectObservation, OptimizerConfig, PriorSizeTable, optimize_quadric
from .sim import TrialResult

log = logging.getLogger(__name__)


def _default_priors() -> dict[str, list[float]]:
    return {"car": [2.0, 0.75, 0.85]}


@dataclass
class PipelineConfig:
    """``associate=False`` groups detections by their logged ``object_id``
    (all into one object when ids are absent).  ``edge_margin`` > 0 marks
    boxes within that many pixels of the border as edge detections, in
    addition to flags carried by the log."""

    refine: bool = False
    associate: bool = True
    min_views: int = 2
    edge_margin: float = 0.0
    gt_match_distance: float = 5.0
    priors: dict[str, list[float]] = field(default_factory=_default_priors)
    init: InitConfig = field(default_factory=InitConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    assoc: AssocConfig = field(default_factory=AssocConfig)

    def __post_init__(self):
        if self.min_views < 2:
            raise ConfigError("min_views must be >= 2")
        self.prior_table = PriorSizeTable(self.priors)


@dataclass
class MapObject:
    id: int
    cls: str
    ellipsoid: EllipsoidParams | None
    n_observations: int
    dynamic: bool
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id, "class": self.cls, "n_observations": self.n_observations,
            "dynamic": self.dynamic,
            "params": None if self.ellipsoid is None else [float(v) for v in self.ellipsoid.vector],
            "error": self.error,
        }


@dataclass
class PipelineResult:
    method: str
    objects: list[MapObject]
    trials: list[TrialResult]
    track_gt: dict[int, int | None]
    track_object_ids: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class _TrackState:
    track: ObjectTrack
    dets: list[LogDetection] = field(default_factory=list)
    error: str = ""


def _at_edge(ld: LogDetection, size, margin) -> bool:
    if ld.at_image_edge:
        return True
    if margin <= 0 or size is None:
        return False
    b = ld.det.bbox
    w, h = size
    return b.x1 <= margin or b.y1 <= margin or b.x2 >= w - margin or b.y2 >= h - margin


def _estimate(st: _TrackState, method: str, cfg: PipelineConfig, size) -> None:
    trk = st.track
    try:
        e = METHODS[method](ObservationSet(list(trk.history)), cfg.init)
    except InitFailure as exc:
        trk.ellipsoid, st.error = None, str(exc)
        return
    if cfg.refine:
        obs = [
            ObjectObservation(v, b, ld.texture_plane, _at_edge(ld, size, cfg.edge_margin))
            for (v, b), ld in zip(trk.history, st.dets)
        ]
        e, _ = optimize_quadric(e, obs, trk.cls, cfg.prior_table, cfg.optimizer)
    trk.ellipsoid, st.error = e, ""


def run_pipeline(dlog: DetectionLog, method: str = "tri+yaw", cfg: PipelineConfig | None = None) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    states: dict[int, _TrackState] = {}
    tracker = Tracker(cfg.assoc)
    for frame in dlog.frames:
        if not frame.keyframe:
            continue
        touched: list[int] = []
        if cfg.associate:
            res = tracker.step([ld.det for ld in frame.detections], frame.view)
            for tid, j in res.matches:
                states[tid].dets.append(frame.detections[j])
                touched.append(tid)
            for trk in res.new_tracks:
                j = next(k for k, ld in enumerate(frame.detections) if ld.det.bbox is trk.history[0][1])
                states[trk.id] = _TrackState(trk, [frame.detections[j]])
                touched.append(trk.id)
        else:
            for ld in frame.detections:
                tid = ld.object_id if ld.object_id is not None else 0
                if tid not in states:
                    states[tid] = _TrackState(ObjectTrack(tid, ld.det.cls))
                st = states[tid]
                st.track.history.append((frame.view, ld.det.bbox))
                st.dets.append(ld)
                touched.append(tid)
        for tid in touched:
            st = states[tid]
            if st.track.dynamic:
                st.error = "flagged dynamic"
                continue
            if len(st.track.history) < cfg.min_views:
                continue
            _estimate(st, method, cfg, dlog.image_size)
    objects = [
        MapObject(tid, st.track.cls, st.track.ellipsoid, len(st.track.history), st.track.dynamic, st.error)
        for tid, st in sorted(states.items())
    ]
    track_gt = match_gt(dlog, states, cfg)
    trials = score(dlog, method, objects, track_gt)
    ids = {tid: [ld.object_id for ld in st.dets if ld.object_id is not None] for tid, st in sorted(states.items())}
    return PipelineResult(method, objects, trials, track_gt, ids)


def match_gt(dlog: DetectionLog, states: Mapping[int, _TrackState], cfg: PipelineConfig) -> dict[int, int | None]:
    """Track id -> GT id.

    With logged object ids each track takes the majority id of its
    detections; otherwise map objects and GT objects of the same class are
    paired by centroid distance (Hungarian, gated by ``gt_match_distance``).
    """
    out: dict[int, int | None] = {tid: None for tid in states}
    if not dlog.gt_objects:
        return out
    have_ids = any(ld.object_id is not None for st in states.values() for ld in st.dets)
    if have_ids:
        best: dict[int, tuple[int, int]] = {}
        for tid, st in sorted(states.items()):
            ids = [ld.object_id for ld in st.dets if ld.object_id is not None]
            if not ids:
                continue
            vals, counts = np.unique(ids, return_counts=True)
            gid = int(vals[np.argmax(counts)])
            n = int(counts.max())
            # one track per GT object: the one holding most of its detections
            if gid not in best or n > best[gid][1]:
                best[gid] = (tid, n)
        for gid, (tid, _) in best.items():
            out[tid] = gid
        return out
    tids = [tid for tid, st in sorted(states.items()) if st.track.ellipsoid is not None and not st.track.dynamic]
    gts = dlog.gt_objects
    C = np.full((len(tids), len(gts)), 1e9)
    for i, tid in enumerate(tids):
        st = states[tid]
        for j, g in enumerate(gts):
            d = np.linalg.norm(st.track.ellipsoid.t - g.ellipsoid.t)
            if g.cls == st.track.cls and d <= cfg.gt_match_distance:
                C[i, j] = d
    if C.size:
        for i, j in zip(*linear_sum_assignment(C)):
            if C[i, j] < 1e9:
                out[tids[i]] = gts[j].id
    return out


def _gt_views(dlog: DetectionLog, gid: int, have_ids: bool) -> list[CameraView]:
    views = []
    for fr in dlog.frames:
        if not fr.keyframe:
            continue
        if have_ids and not any(ld.object_id == gid for ld in fr.detections):
            continue
        views.append(fr.gt_view if fr.gt_view is not None else fr.view)
    return views


def _mean_iou(pred: EllipsoidParams, gt: EllipsoidParams, views: Sequence[CameraView]) -> float:
    vals = []
    for v in views:
        try:
            gt_box = geo.project_bbox(gt, v)
        except ProjectionDegenerate:
            continue
        try:
            vals.append(geo.iou_2d(gt_box, geo.project_bbox(pred, v)))
        except ProjectionDegenerate:
            vals.append(0.0)
    return float(np.mean(vals)) if vals else float("nan")


def score(dlog: DetectionLog, method: str, objects: Sequence[MapObject], track_gt) -> list[TrialResult]:
    """One result per GT object; unmatched or dynamic objects count as failures."""
    from .metrics import metric_e_axe, metric_e_trans

    meta = dlog.meta
    sweep = str(meta.get("sweep", meta.get("sequence", "log")))
    nt = str(meta.get("noise_type", "none"))
    level = float(meta.get("noise_level", 0.0))
    seed = int(meta.get("seed", 0))
    by_gt = {gid: tid for tid, gid in track_gt.items() if gid is not None}
    objs = {o.id: o for o in objects}
    have_ids = any(ld.object_id is not None for fr in dlog.frames for ld in fr.detections)
    out = []
    for g in dlog.gt_objects:
        o = objs.get(by_gt.get(g.id, -1))
        if o is None or o.ellipsoid is None or o.dynamic:
            err = "no track" if o is None else ("dynamic" if o.dynamic else o.error)
            out.append(TrialResult(sweep, method, nt, level, g.id, seed, False, error=err))
            continue
        e = o.ellipsoid
        out.append(TrialResult(
            sweep, method, nt, level, g.id, seed, True,
            _mean_iou(e, g.ellipsoid, _gt_views(dlog, g.id, have_ids)),
            metric_e_trans(g.ellipsoid, e), metric_e_axe(g.ellipsoid, e),
        ))
    return out


def run_pipeline_many(
    logs: Sequence[DetectionLog], methods: Sequence[str], cfg: PipelineConfig | None = None
) -> tuple[list[TrialResult], list[PipelineResult]]:
    """Logs in the given order, every method per log (the simulator's order)."""
    results, runs = [], []
    for dlog in logs:
        for m in methods:
            r = run_pipeline(dlog, m, cfg)
            runs.append(r)
            results.extend(r.trials)
    return results, runs
