"""DetectionLog: the JSON exchange format between the simulator and the pipeline.

Layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "frames": [
        {"id": 0, "pose": [16 floats, T_cw row-major], "K": [9 floats],
         "keyframe": true,                      # optional, default true
         "gt_pose": [16 floats],                # optional true T_cw
         "detections": [
           {"bbox": [x1, y1, x2, y2], "class": "car",
            "keypoints": [[u, v], ...],         # optional
            "mask_polygon": [[u, v], ...],      # optional
            "object_id": 3,                     # optional GT identity
            "texture_plane": [p1, p2, p3, p4],  # optional, world frame
            "at_image_edge": false}             # optional
         ]}
      ],
      "gt_objects": [                           # optional
        {"id": 3, "class": "car", "size": [ax, ay, az], "pose": [16 floats, T_wo],
         "params": [9 floats]}                  # optional exact 9-vector
      ],
      "image_size": [w, h],                     # optional
      "meta": {...}                             # optional, free-form
    }

``size`` holds half-axis lengths.  When ``params`` is present it takes
precedence over ``size``/``pose``, which lets simulator exports round-trip
bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assoc import DetectionInstance, Mask
from .errors import IngestionError
from .geometry import BBox, CameraView, EllipsoidParams, PlaneH, matrix_to_euler

LOG_SCHEMA_VERSION = 1


@dataclass
class LogDetection:
    det: DetectionInstance
    object_id: int | None = None
    texture_plane: PlaneH | None = None
    at_image_edge: bool = False


@dataclass
class LogFrame:
    id: int
    view: CameraView
    detections: list[LogDetection]
    keyframe: bool = True
    gt_view: CameraView | None = None


@dataclass
class GTObject:
    id: int
    cls: str
    ellipsoid: EllipsoidParams


@dataclass
class DetectionLog:
    frames: list[LogFrame]
    gt_objects: list[GTObject] = field(default_factory=list)
    image_size: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise IngestionError("frame ids must be strictly increasing")
        gids = [g.id for g in self.gt_objects]
        if len(set(gids)) != len(gids):
            raise IngestionError("GT object ids must be unique")

    def gt(self, oid: int) -> GTObject:
        for g in self.gt_objects:
            if g.id == oid:
                return g
        raise KeyError(oid)


def _pose(x, name) -> np.ndarray:
    T = np.asarray(x, dtype=float)
    if T.size != 16:
        raise IngestionError(f"{name} must have 16 entries")
    return T.reshape(4, 4)


def ellipsoid_pose(e: EllipsoidParams) -> np.ndarray:
    """Object-to-world transform ``T_wo`` of an ellipsoid."""
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = e.R, e.t
    return T


def _flat(M) -> list[float]:
    return [float(v) for v in np.asarray(M, dtype=float).ravel()]


def log_from_dict(d: dict) -> DetectionLog:
    try:
        if d.get("schema_version") != LOG_SCHEMA_VERSION:
            raise IngestionError(f"unsupported log schema_version {d.get('schema_version')!r}")
        frames = []
        for fr in d["frames"]:
            K = np.asarray(fr["K"], dtype=float).reshape(3, 3)
            view = CameraView(K, _pose(fr["pose"], "pose"))
            gt_view = CameraView(K, _pose(fr["gt_pose"], "gt_pose")) if "gt_pose" in fr else None
            dets = []
            for dd in fr.get("detections", []):
                mask = Mask(polygon=dd["mask_polygon"]) if dd.get("mask_polygon") else None
                det = DetectionInstance(
                    BBox.from_array(dd["bbox"]), str(dd["class"]), dd.get("keypoints"), mask
                )
                plane = PlaneH(dd["texture_plane"]) if dd.get("texture_plane") is not None else None
                oid = dd.get("object_id")
                dets.append(LogDetection(det, None if oid is None else int(oid), plane,
                                         bool(dd.get("at_image_edge", False))))
            frames.append(LogFrame(int(fr["id"]), view, dets, bool(fr.get("keyframe", True)), gt_view))
        gts = []
        for g in d.get("gt_objects", []):
            if "params" in g:
                e = EllipsoidParams.from_vector(g["params"])
            else:
                T = _pose(g["pose"], "gt pose")
                e = EllipsoidParams(g["size"], T[:3, 3], matrix_to_euler(T[:3, :3]))
            gts.append(GTObject(int(g["id"]), str(g["class"]), e))
        size = d.get("image_size")
        return DetectionLog(frames, gts, tuple(size) if size else None, dict(d.get("meta", {})))
    except IngestionError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"malformed detection log: {exc!r}") from exc


def log_to_dict(log: DetectionLog) -> dict:
    frames = []
    for fr in log.frames:
        out = {"id": fr.id, "pose": _flat(fr.view.T_cw), "K": _flat(fr.view.K)}
        if not fr.keyframe:
            out["keyframe"] = False
        if fr.gt_view is not None:
            out["gt_pose"] = _flat(fr.gt_view.T_cw)
        dets = []
        for ld in fr.detections:
            dd = {"bbox": _flat(ld.det.bbox.as_array()), "class": ld.det.cls}
            if ld.det.keypoints is not None:
                dd["keypoints"] = ld.det.keypoints.tolist()
            if ld.det.mask is not None and ld.det.mask.polygon is not None:
                dd["mask_polygon"] = ld.det.mask.polygon.tolist()
            if ld.object_id is not None:
                dd["object_id"] = ld.object_id
            if ld.texture_plane is not None:
                dd["texture_plane"] = _flat(np.asarray(ld.texture_plane))
            if ld.at_image_edge:
                dd["at_image_edge"] = True
            dets.append(dd)
        out["detections"] = dets
        frames.append(out)
    d = {"schema_version": LOG_SCHEMA_VERSION, "frames": frames}
    if log.gt_objects:
        d["gt_objects"] = [
            {"id": g.id, "class": g.cls, "size": _flat(g.ellipsoid.a),
             "pose": _flat(ellipsoid_pose(g.ellipsoid)), "params": _flat(g.ellipsoid.vector)}
            for g in log.gt_objects
        ]
    if log.image_size is not None:
        d["image_size"] = list(log.image_size)
    if log.meta:
        d["meta"] = log.meta
    return d


def load_log(path) -> DetectionLog:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read detection log {path}: {exc}") from exc
    return log_from_dict(d)


def save_log(log: DetectionLog, path) -> None:
    Path(path).write_text(json.dumps(log_to_dict(log), indent=1) + "\n")
