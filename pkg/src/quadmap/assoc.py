"""Object data association across keyframes.

Each (track, detection) pair gets a cost

    a_ij = alpha * a_sem + beta * a_geo + gamma * a_kal

from three distances in [0, 1]: the share of the detection's tracked
keypoints falling outside the track's last mask, one minus the IoU of the
track's projected ellipsoid with the detection box, and one minus the IoU of
the Kalman-predicted track box with the detection box.  A cue that cannot be
evaluated yet contributes the neutral value 0.5.  Class mismatches and
costs above the gate are forbidden; the Hungarian method then picks the
largest set of allowed pairs with the least total cost.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry as geo
from .errors import ConfigError, InsufficientParallax, ProjectionDegenerate, TooFewViews
from .geometry import BBox, CameraView, EllipsoidParams
from .initialize import ObservationSet, triangulate_center

log = logging.getLogger(__name__)

NEUTRAL = 0.5


# ---------------------------------------------------------------------------
# Masks and detections
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mask:
    """Image region given as a polygon ``(K, 2)`` or a boolean raster ``(H, W)``.

    Raster pixel ``(row v, col u)`` covers ``[u, u+1) x [v, v+1)``.
    """

    polygon: np.ndarray | None = None
    raster: np.ndarray | None = None

    def __post_init__(self):
        if (self.polygon is None) == (self.raster is None):
            raise ValueError("give exactly one of polygon or raster")
        if self.polygon is not None:
            p = np.asarray(self.polygon, dtype=float).reshape(-1, 2)
            if len(p) < 3:
                raise ValueError("a polygon needs at least 3 vertices")
            object.__setattr__(self, "polygon", p)
            if self.area <= 0:
                raise ValueError("mask area must be positive")
        else:
            r = np.asarray(self.raster, dtype=bool)
            if r.ndim != 2 or not r.any():
                raise ValueError("raster mask must be 2-D with positive area")
            object.__setattr__(self, "raster", r)

    @property
    def area(self) -> float:
        if self.polygon is not None:
            x, y = self.polygon.T
            return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2)
        return float(self.raster.sum())

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.raster is not None:
            u = np.floor(pts[:, 0]).astype(int)
            v = np.floor(pts[:, 1]).astype(int)
            h, w = self.raster.shape
            ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
            out = np.zeros(len(pts), dtype=bool)
            out[ok] = self.raster[v[ok], u[ok]]
            return out
        # even-odd ray casting
        x, y = pts[:, 0:1], pts[:, 1:2]
        x1, y1 = self.polygon[:, 0], self.polygon[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        return np.count_nonzero(crosses & (x < xi), axis=1) % 2 == 1

    @classmethod
    def from_bbox(cls, box: BBox) -> "Mask":
        x1, y1, x2, y2 = box.as_array()
        return cls(polygon=[[x1, y1], [x2, y1], [x2, y2], [x1, y2]])


@dataclass
class DetectionInstance:
    """One detection.  ``keypoints`` are the positions, in the previous
    keyframe, of points tracked into this detection's mask."""

    bbox: BBox
    cls: str
    keypoints: np.ndarray | None = None
    mask: Mask | None = None

    def __post_init__(self):
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Kalman box filter
# ---------------------------------------------------------------------------


def bbox_to_z(box: BBox) -> np.ndarray:
    """``(cx, cy, s, r)``: centre, area and aspect ratio ``w / h``."""
    return np.array([*box.center, box.area, box.width / box.height])


def z_to_bbox(z) -> BBox:
    cx, cy, s, r = z[:4]
    w = np.sqrt(s * r)
    h = s / w
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class KalmanBox:
    """Constant-velocity filter on ``(cx, cy, s, r, vx, vy, vs)``.

    Noise settings are the usual SORT ones: measurement noise 1 on the
    centre and 10 on area and aspect, very uncertain initial velocities.
    """

    F = np.eye(7) + np.eye(7, k=4)
    H = np.eye(4, 7)

    def __init__(self, box: BBox):
        self.x = np.zeros(7)
        self.x[:4] = bbox_to_z(box)
        self.P = np.eye(7) * 10.0
        self.P[4:, 4:] *= 1000.0
        self.Q = np.eye(7)
        self.Q[4:, 4:] *= 0.01
        self.Q[-1, -1] *= 0.01
        self.R = np.eye(4)
        self.R[2:, 2:] *= 10.0
        self.hits = 1
        self.age = 0

    def copy(self) -> "KalmanBox":
        k = KalmanBox.__new__(KalmanBox)
        k.x, k.P, k.Q, k.R = self.x.copy(), self.P.copy(), self.Q.copy(), self.R.copy()
        k.hits, k.age = self.hits, self.age
        return k

    def predict(self) -> BBox:
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        self.age += 1
        return self.bbox

    def update(self, box: BBox) -> None:
        y = bbox_to_z(box) - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self.R
        K = np.linalg.solve(S, self.H @ self.P).T
        self.x = self.x + K @ y
        # Joseph form keeps P symmetric positive definite
        IKH = np.eye(7) - K @ self.H
        self.P = IKH @ self.P @ IKH.T + K @ self.R @ K.T
        self.hits += 1

    @property
    def bbox(self) -> BBox:
        return z_to_bbox(self.x)


# ---------------------------------------------------------------------------
# Tracks and config
# ---------------------------------------------------------------------------


@dataclass
class ObjectTrack:
    id: int
    cls: str
    ellipsoid: EllipsoidParams | None = None
    kalman: KalmanBox | None = None
    last_mask: Mask | None = None
    history: list[tuple[CameraView, BBox]] = field(default_factory=list)
    dynamic: bool = False
    predicted: BBox | None = None

    def observations(self) -> ObservationSet:
        return ObservationSet(list(self.history))

    def mark_dynamic(self) -> None:
        self.dynamic = True
        self.ellipsoid = None


@dataclass
class AssocConfig:
    """Affinity weights, gate and dynamic-object rule.

    A track is flagged dynamic when the box centres of its last ``window``
    keyframes cannot be explained by one static point: the RMS reprojection
    residual of their triangulation exceeds ``drift_px``.
    """

    alpha: float = 0.8
    beta: float = 1.0
    gamma: float = 0.8
    gate: float = 1.3
    new_track_threshold: float | None = None
    window: int = 5
    drift_px: float = 10.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("affinity weights must be >= 0")
        if not 0 < self.gate <= self.max_cost:
            raise ConfigError(f"gate must lie in (0, {self.max_cost}]")
        if self.new_track_threshold is None:
            self.new_track_threshold = self.gate
        if self.window < 2 or self.drift_px <= 0:
            raise ConfigError("window must be >= 2 and drift_px > 0")

    @property
    def max_cost(self) -> float:
        return self.alpha + self.beta + self.gamma

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "gate": self.gate, "new_track_threshold": self.new_track_threshold,
            "window": self.window, "drift_px": self.drift_px,
        }

    @classmethod
    def from_dict(cls, d) -> "AssocConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown assoc keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# Affinities
# ---------------------------------------------------------------------------


def affinity_semantic(track: ObjectTrack, det: DetectionInstance) -> float:
    """Share of the detection's tracked keypoints outside the track's last mask."""
    if det.keypoints is None or len(det.keypoints) == 0 or track.last_mask is None:
        log.debug("semantic cue unavailable for track %d; using neutral value", track.id)
        return NEUTRAL
    inside = np.count_nonzero(track.last_mask.contains(det.keypoints))
    return 1.0 - inside / len(det.keypoints)


def affinity_iou(track: ObjectTrack, det: DetectionInstance, view: CameraView) -> float:
    """One minus IoU of the projected track ellipsoid and the detection box."""
    if track.ellipsoid is None:
        return NEUTRAL
    try:
        proj = geo.project_bbox(track.ellipsoid, view)
    except ProjectionDegenerate:
        return 1.0
    return 1.0 - geo.iou_2d(proj, det.bbox)


def kalman_predict(track: ObjectTrack) -> BBox:
    """Advance the track's filter one frame and cache the predicted box."""
    track.predicted = track.kalman.predict()
    return track.predicted


def kalman_update(track: ObjectTrack, box: BBox) -> None:
    track.kalman.update(box)


def affinity_kalman(track: ObjectTrack, det: DetectionInstance) -> float:
    """One minus IoU of the Kalman-predicted track box and the detection box."""
    if track.kalman is None:
        return NEUTRAL
    pred = track.predicted if track.predicted is not None else track.kalman.bbox
    return 1.0 - geo.iou_2d(pred, det.bbox)


def build_cost_matrix(
    tracks: Sequence[ObjectTrack],
    detections: Sequence[DetectionInstance],
    view: CameraView,
    cfg: AssocConfig | None = None,
) -> np.ndarray:
    """Weighted cue sum per pair; ``inf`` where the classes differ."""
    cfg = cfg or AssocConfig()
    C = np.full((len(tracks), len(detections)), np.inf)
    for i, trk in enumerate(tracks):
        for j, det in enumerate(detections):
            if trk.cls != det.cls:
                continue
            C[i, j] = (
                cfg.alpha * affinity_semantic(trk, det)
                + cfg.beta * affinity_iou(trk, det, view)
                + cfg.gamma * affinity_kalman(trk, det)
            )
    return C


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    cost: float
    unmatched_rows: list[int]
    unmatched_cols: list[int]


def hungarian(cost) -> Assignment:
    """Partial matching that never uses ``inf`` entries.

    Among matchings of maximum size the one of least total cost is
    returned.  Each forbidden entry is replaced by a constant larger than
    any total of finite entries, so the solver first minimizes the number
    of forbidden pairs and those pairs are then dropped.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, m = C.shape
    if n == 0 or m == 0:
        return Assignment([], 0.0, list(range(n)), list(range(m)))
    finite = np.isfinite(C)
    if np.any(C[finite] < 0) or np.any(np.isnan(C)) or np.any(C == -np.inf):
        raise ValueError("cost entries must be >= 0 or +inf")
    big = (np.abs(C[finite]).sum() + 1.0) * (min(n, m) + 1)
    rows, cols = linear_sum_assignment(np.where(finite, C, big))
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return Assignment(
        pairs,
        float(sum(C[r, c] for r, c in pairs)),
        [r for r in range(n) if r not in used_r],
        [c for c in range(m) if c not in used_c],
    )


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive reference for :func:`hungarian` on small matrices.

    Enumerates every injection of the shorter side into the longer one and
    keeps the one with the most finite pairs, then the least cost.
    """
    C = np.asarray(cost, dtype=float)
    n, m = C.shape
    if n > m:
        t = brute_force_assignment(C.T)
        pairs = sorted((j, i) for i, j in t.pairs)
    elif n == 0:
        pairs = []
    else:
        perms = np.array(list(itertools.permutations(range(m), n)))
        vals = C[np.arange(n), perms]
        finite = np.isfinite(vals)
        count = finite.sum(axis=1)
        total = np.where(finite, vals, 0.0).sum(axis=1)
        best = np.lexsort((total, -count))[0]
        pairs = [(i, int(perms[best, i])) for i in range(n) if finite[best, i]]
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return Assignment(
        pairs,
        float(sum(C[r, c] for r, c in pairs)),
        [r for r in range(n) if r not in used_r],
        [c for c in range(m) if c not in used_c],
    )


# ---------------------------------------------------------------------------
# Association step
# ---------------------------------------------------------------------------


@dataclass
class AssociationResult:
    matches: list[tuple[int, int]]  # (track id, detection index)
    new_tracks: list[ObjectTrack]
    lost_tracks: list[int]
    cost: np.ndarray


def center_drift(history: Sequence[tuple[CameraView, BBox]]) -> float:
    """RMS pixel residual of box centres against their static triangulation."""
    try:
        _, rms = triangulate_center(ObservationSet(list(history)), parallax_ratio=0.0)
    except (InsufficientParallax, TooFewViews):
        return 0.0
    return rms


def _new_track(tid: int, det: DetectionInstance, view: CameraView) -> ObjectTrack:
    return ObjectTrack(
        tid, det.cls, kalman=KalmanBox(det.bbox), last_mask=det.mask, history=[(view, det.bbox)]
    )


def associate(
    tracks: Sequence[ObjectTrack],
    detections: Sequence[DetectionInstance],
    view: CameraView,
    cfg: AssocConfig | None = None,
    *,
    next_id: int | None = None,
) -> AssociationResult:
    """One keyframe of association; mutates the matched tracks in place.

    Every track's filter is advanced first.  Matched tracks then get a
    Kalman update, their mask replaced and the observation appended; a
    track whose recent box centres drift from a static point is flagged
    dynamic.  Unmatched detections whose best cost exceeds
    ``new_track_threshold`` start new tracks, numbered from ``next_id``
    (default: one past the largest existing id).
    """
    cfg = cfg or AssocConfig()
    tracks = sorted(tracks, key=lambda t: t.id)
    for trk in tracks:
        if trk.kalman is not None:
            kalman_predict(trk)
    C = build_cost_matrix(tracks, detections, view, cfg)
    gated = np.where(C <= cfg.gate, C, np.inf)
    asg = hungarian(gated)
    matches = []
    for i, j in asg.pairs:
        trk, det = tracks[i], detections[j]
        if trk.kalman is None:
            trk.kalman = KalmanBox(det.bbox)
        else:
            kalman_update(trk, det.bbox)
        if det.mask is not None:
            trk.last_mask = det.mask
        trk.history.append((view, det.bbox))
        if not trk.dynamic and len(trk.history) >= cfg.window:
            if center_drift(trk.history[-cfg.window:]) > cfg.drift_px:
                trk.mark_dynamic()
        matches.append((trk.id, j))
    if next_id is None:
        next_id = max((t.id for t in tracks), default=-1) + 1
    new = []
    for j in asg.unmatched_cols:
        col = C[:, j]
        best = col.min() if col.size else np.inf
        if best > cfg.new_track_threshold:
            new.append(_new_track(next_id, detections[j], view))
            next_id += 1
    lost = [tracks[i].id for i in asg.unmatched_rows]
    return AssociationResult(matches, new, lost, C)


class Tracker:
    """Owns the track store and hands out ids."""

    def __init__(self, cfg: AssocConfig | None = None):
        self.cfg = cfg or AssocConfig()
        self.tracks: list[ObjectTrack] = []
        self._next_id = 0

    def step(self, detections: Sequence[DetectionInstance], view: CameraView) -> AssociationResult:
        res = associate(self.tracks, detections, view, self.cfg, next_id=self._next_id)
        self.tracks.extend(res.new_tracks)
        self._next_id += len(res.new_tracks)
        return res

    def track(self, tid: int) -> ObjectTrack:
        for t in self.tracks:
            if t.id == tid:
                return t
        raise KeyError(tid)
