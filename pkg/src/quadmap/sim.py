"""Synthetic arc-camera scenes and the Monte Carlo noise sweep.

Cameras sit on a circular arc around the object region at a fixed height,
all looking horizontally at the arc centre.  World axes follow the camera
convention (x right, y down, z forward for the middle camera); the ground is
the plane ``y = 0``.

Noise is specified as fractions ("percent"):

* translation: sigma per axis = pct * |baseline to the previous camera|
* rotation: random-axis angle with sigma = pct * max(relative angle, 1 deg)
* bbox: sigma per coordinate = pct * box side length

Pose noise perturbs each consecutive relative pose and re-chains them, so
errors accumulate like odometry drift.  Camera 0 is the gauge and is never
perturbed.

Every random draw comes from its own stream keyed by
``(master_seed, purpose, object, seed)``, so a trial's inputs do not depend
on execution order or on the noise level (levels scale the same
standard-normal draws).
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry as geo
from .errors import ConfigError, InitFailure, ObjectNotVisible, ProjectionDegenerate
from .geometry import BBox, CameraView, EllipsoidParams
from .initialize import METHODS, InitConfig, ObservationSet

SCHEMA_VERSION = 1

NOISE_TYPES = ("translation", "rotation", "bbox")

# RNG purposes, part of every stream key
_OBJECT, _TRANSLATION, _ROTATION, _BBOX = 0, 1, 2, 3


def _default_sweeps() -> dict[str, list[float]]:
    return {
        "translation": [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
        "rotation": [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
        "bbox": [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06],
    }


@dataclass
class SceneConfig:
    n_cameras: int = 5
    arc_degrees: float = 18.0
    arc_radius: float = 10.0
    camera_height: float = 1.65
    center_jitter: float = 1.0
    axis_ranges: list[list[float]] = field(
        default_factory=lambda: [[1.7, 2.3], [0.6, 0.9], [0.7, 1.0]]
    )
    yaw_range_deg: float = 5.0
    image_size: list[int] = field(default_factory=lambda: [1242, 375])
    K: list[list[float]] = field(
        default_factory=lambda: [[721.5377, 0.0, 609.5593], [0.0, 721.5377, 172.854], [0.0, 0.0, 1.0]]
    )
    sweeps: dict[str, list[float]] = field(default_factory=_default_sweeps)
    n_objects: int = 10
    n_seeds: int = 10
    master_seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be >= 2")
        if self.arc_radius <= 0 or self.arc_degrees < 0:
            raise ConfigError("arc radius must be positive and arc angle non-negative")
        if len(self.axis_ranges) != 3 or any(not 0 < lo <= hi for lo, hi in self.axis_ranges):
            raise ConfigError("axis_ranges must be three nonempty positive [lo, hi] pairs")
        if self.yaw_range_deg < 0:
            raise ConfigError("yaw_range_deg must be >= 0")
        for name, levels in self.sweeps.items():
            if name not in NOISE_TYPES:
                raise ConfigError(f"unknown noise type {name!r}")
            if any(not 0 <= lv <= 1 for lv in levels):
                raise ConfigError(f"noise levels for {name} must lie in [0, 1]")
        if self.n_objects < 1 or self.n_seeds < 1:
            raise ConfigError("n_objects and n_seeds must be >= 1")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.asarray(self.K, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_semantics"] = {
            "translation": "sigma per axis = level * |baseline to previous camera|, chained",
            "rotation": "random-axis angle, sigma = level * max(relative angle to previous camera, 1 deg), chained",
            "bbox": "sigma per coordinate = level * box side length",
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = {k: v for k, v in d.items() if k != "noise_semantics"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SceneConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class Scene:
    views: list[CameraView]
    gt: EllipsoidParams
    gt_bboxes: list[BBox]
    image_size: tuple[int, int]


@dataclass
class TrialResult:
    sweep: str
    method: str
    noise_type: str
    noise_level: float
    object_id: int
    seed: int
    success: bool
    iou2d: float = float("nan")
    e_trans: float = float("nan")
    e_axe: float = float("nan")
    error: str = ""
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.success:
            self.iou2d = self.e_trans = self.e_axe = float("nan")


def rng_for(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def arc_cameras(cfg: SceneConfig) -> list[CameraView]:
    K = cfg.intrinsics
    half = np.deg2rad(cfg.arc_degrees) / 2
    phis = np.linspace(-half, half, cfg.n_cameras)
    views = []
    for phi in phis:
        s, c = np.sin(phi), np.cos(phi)
        center = np.array([cfg.arc_radius * s, -cfg.camera_height, -cfg.arc_radius * c])
        R_cw = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        views.append(CameraView.from_Rt(K, R_cw, -R_cw @ center))
    return views


def render_bboxes(e: EllipsoidParams, views: Sequence[CameraView], image_size) -> list[BBox]:
    w, h = image_size
    out = []
    for v in views:
        try:
            b = geo.project_bbox(e, v)
        except ProjectionDegenerate as exc:
            raise ObjectNotVisible(str(exc)) from exc
        if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
            raise ObjectNotVisible(f"box {b} leaves the {w}x{h} image")
        out.append(b)
    return out


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Arc cameras plus one random car-sized ellipsoid resting on the ground."""
    rng = rng_for(cfg.master_seed, _OBJECT, seed)
    a = np.array([rng.uniform(lo, hi) for lo, hi in cfg.axis_ranges])
    yaw = np.deg2rad(rng.uniform(-cfg.yaw_range_deg, cfg.yaw_range_deg))
    dx, dz = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    gt = EllipsoidParams(a, [dx, -a[1], dz], [0.0, yaw, 0.0])
    views = arc_cameras(cfg)
    size = tuple(cfg.image_size)
    return Scene(views, gt, render_bboxes(gt, views, size), size)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def _random_axes(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def perturb_pose(
    views: Sequence[CameraView],
    translation_pct: float,
    rotation_pct: float,
    seed,
) -> list[CameraView]:
    """Perturb the chain of consecutive relative poses; camera 0 stays fixed.

    Each step ``T_{i,i-1}`` gets translation noise with per-axis sigma
    ``translation_pct * |t_{i,i-1}|`` and a random-axis rotation (about the
    camera centre) with sigma ``rotation_pct * max(angle(R_{i,i-1}), 1 deg)``.
    The noisy steps are re-chained, so errors accumulate like odometry drift.

    ``seed`` is an int or a pair of generators ``(translation_rng, rotation_rng)``.
    """
    if not (0 <= translation_pct <= 1 and 0 <= rotation_pct <= 1):
        raise ValueError("percentages must lie in [0, 1]")
    if isinstance(seed, tuple):
        rng_t, rng_r = seed
    else:
        rng_t = rng_for(int(seed), _TRANSLATION)
        rng_r = rng_for(int(seed), _ROTATION)
    n = len(views)
    dt = rng_t.standard_normal((n, 3))
    axes = _random_axes(rng_r, n)
    angles = rng_r.standard_normal(n)
    if translation_pct == 0 and rotation_pct == 0:
        return list(views)

    out = [views[0]]
    T_prev_noisy = views[0].T_cw
    for i in range(1, n):
        step = views[i].T_cw @ np.linalg.inv(views[i - 1].T_cw)
        out_step = perturb_relative(step, translation_pct, rotation_pct, dt[i], axes[i], angles[i])
        T_prev_noisy = out_step @ T_prev_noisy
        out.append(CameraView(views[i].K, T_prev_noisy))
    return out


def perturb_relative(T, translation_pct, rotation_pct, z_t, axis, z_r) -> np.ndarray:
    """Apply scaled standard-normal draws ``z_t`` (3,) and ``z_r`` to a relative pose."""
    R, t = T[:3, :3], T[:3, 3]
    t = t + translation_pct * np.linalg.norm(t) * z_t
    rel_angle = np.linalg.norm(Rotation.from_matrix(R).as_rotvec())
    sigma_r = rotation_pct * max(rel_angle, np.deg2rad(1.0))
    dR = Rotation.from_rotvec(axis * z_r * sigma_r).as_matrix()
    R, t = dR @ R, dR @ t
    U, _, Vt = np.linalg.svd(R)
    out = np.eye(4)
    out[:3, :3], out[:3, 3] = U @ Vt, t
    return out


def perturb_bbox(bboxes: Sequence[BBox], pct: float, image_size, seed) -> list[BBox]:
    """Gaussian noise on box corners, sigma = pct * side length, clamped to the image."""
    if not 0 <= pct <= 1:
        raise ValueError("pct must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(int(seed), _BBOX)
    z = rng.standard_normal((len(bboxes), 4))
    if pct == 0:
        return list(bboxes)
    w, h = image_size
    out = []
    for b, zi in zip(bboxes, z):
        sig = pct * np.array([b.width, b.height, b.width, b.height])
        x1, y1, x2, y2 = b.as_array() + sig * zi
        x1, x2 = sorted((float(np.clip(x1, 0, w)), float(np.clip(x2, 0, w))))
        y1, y2 = sorted((float(np.clip(y1, 0, h)), float(np.clip(y2, 0, h))))
        x1, x2 = _min_extent(x1, x2, w)
        y1, y2 = _min_extent(y1, y2, h)
        out.append(BBox(x1, y1, x2, y2))
    return out


def _min_extent(lo: float, hi: float, size: float, extent: float = 1.0):
    if hi - lo >= extent:
        return lo, hi
    mid = min(max(0.5 * (lo + hi), extent / 2), size - extent / 2)
    return mid - extent / 2, mid + extent / 2


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass
class TrialInput:
    """Noisy observations handed to every method of one paired trial."""

    scene: Scene
    views: list[CameraView]
    bboxes: list[BBox]
    noise_type: str
    noise_level: float
    object_id: int
    seed: int

    def observations(self) -> ObservationSet:
        return ObservationSet(list(zip(self.views, self.bboxes)))


def make_trial(cfg: SceneConfig, noise_type: str, level: float, object_id: int, seed: int) -> TrialInput:
    scene = generate_scene(cfg, object_id)
    key = (object_id, seed)
    tr = level if noise_type == "translation" else 0.0
    rot = level if noise_type == "rotation" else 0.0
    bb = level if noise_type == "bbox" else 0.0
    views = perturb_pose(
        scene.views,
        tr,
        rot,
        (rng_for(cfg.master_seed, _TRANSLATION, *key), rng_for(cfg.master_seed, _ROTATION, *key)),
    )
    boxes = perturb_bbox(scene.gt_bboxes, bb, scene.image_size, rng_for(cfg.master_seed, _BBOX, *key))
    return TrialInput(scene, views, boxes, noise_type, level, object_id, seed)


def mean_iou2d(pred: EllipsoidParams, scene: Scene) -> float:
    """Mean over the true views of IoU(GT box, predicted projection box)."""
    vals = []
    for view, gt_box in zip(scene.views, scene.gt_bboxes):
        try:
            vals.append(geo.iou_2d(gt_box, geo.project_bbox(pred, view)))
        except ProjectionDegenerate:
            vals.append(0.0)
    return float(np.mean(vals))


def evaluate(pred: EllipsoidParams, scene: Scene) -> tuple[float, float, float]:
    from .metrics import metric_e_axe, metric_e_trans

    return mean_iou2d(pred, scene), metric_e_trans(scene.gt, pred), metric_e_axe(scene.gt, pred)


def run_trial(trial: TrialInput, method: str, sweep: str = "", init_cfg: InitConfig | None = None) -> TrialResult:
    fn = METHODS[method]
    t0 = time.perf_counter()
    try:
        pred = fn(trial.observations(), init_cfg)
    except InitFailure as exc:
        return TrialResult(sweep, method, trial.noise_type, trial.noise_level, trial.object_id,
                           trial.seed, False, error=str(exc), wall_time=time.perf_counter() - t0)
    iou, et, ea = evaluate(pred, trial.scene)
    return TrialResult(sweep, method, trial.noise_type, trial.noise_level, trial.object_id,
                       trial.seed, True, iou, et, ea, wall_time=time.perf_counter() - t0)


def trial_log(trial: TrialInput, trial_index: int = 0, cls: str = "car"):
    """The trial as a single-object DetectionLog (noisy poses and boxes, true
    poses under ``gt_pose``, exact GT 9-vector)."""
    from .assoc import DetectionInstance
    from .logio import DetectionLog, GTObject, LogDetection, LogFrame

    frames = [
        LogFrame(i, v, [LogDetection(DetectionInstance(b, cls), trial.object_id)], True, gv)
        for i, (v, b, gv) in enumerate(zip(trial.views, trial.bboxes, trial.scene.views))
    ]
    meta = {
        "sweep": trial.noise_type, "noise_type": trial.noise_type,
        "noise_level": trial.noise_level, "object_id": trial.object_id,
        "seed": trial.seed, "trial_index": trial_index,
    }
    return DetectionLog(
        frames, [GTObject(trial.object_id, cls, trial.scene.gt)],
        tuple(trial.scene.image_size), meta,
    )


def trial_keys(cfg: SceneConfig, noise_types: Iterable[str] | None = None) -> list[tuple[str, float, int, int]]:
    types = list(noise_types) if noise_types is not None else list(cfg.sweeps)
    return [
        (nt, float(level), obj, seed)
        for nt in types
        for level in cfg.sweeps[nt]
        for obj in range(cfg.n_objects)
        for seed in range(cfg.n_seeds)
    ]


def _run_key(args) -> list[TrialResult]:
    cfg, key, methods, init_cfg = args
    nt, level, obj, seed = key
    trial = make_trial(cfg, nt, level, obj, seed)
    return [run_trial(trial, m, nt, init_cfg) for m in methods]


def iter_sweep(
    cfg: SceneConfig,
    methods: Sequence[str],
    noise_types: Iterable[str] | None = None,
    jobs: int = 1,
    init_cfg: InitConfig | None = None,
) -> Iterator[TrialResult]:
    """Yield results in canonical (noise type, level, object, seed, method) order."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
    if not methods:
        raise ConfigError("at least one method is required")
    tasks = [(cfg, key, tuple(methods), init_cfg) for key in trial_keys(cfg, noise_types)]
    if jobs <= 1:
        for t in tasks:
            yield from _run_key(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        # map preserves submission order, so output order is job-count independent
        for batch in ex.map(_run_key, tasks, chunksize=max(1, len(tasks) // (4 * jobs))):
            yield from batch


def run_sweep(
    cfg: SceneConfig,
    methods: Sequence[str],
    noise_types: Iterable[str] | None = None,
    jobs: int = 1,
    init_cfg: InitConfig | None = None,
) -> list[TrialResult]:
    """Run every method on every (noise type, level, object, seed) trial."""
    return list(iter_sweep(cfg, methods, noise_types, jobs, init_cfg))
