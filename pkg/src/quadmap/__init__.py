"""Ellipsoid (dual quadric) object landmarks from multi-view bounding boxes."""
from .assoc import AssocConfig, DetectionInstance, Mask, ObjectTrack, Tracker, associate, hungarian
from .errors import ConfigError, IngestionError, InitFailure, QuadmapError
from .geometry import (
    BBox,
    CameraView,
    DualConic,
    DualQuadric,
    EllipsoidParams,
    PlaneH,
    backproject_bbox_planes,
    compose_dual_quadric,
    conic_bbox,
    decompose_dual_quadric,
    iou_2d,
    project_bbox,
    project_quadric,
)
from .initialize import METHODS, InitConfig, ObservationSet, init_baseline_linear, init_dqp, init_tri
from .logio import DetectionLog, load_log, save_log
from .metrics import MetricsRow, aggregate
from .optimize import ObjectObservation, OptimizerConfig, PriorSizeTable, optimize_quadric, total_cost
from .pipeline import PipelineConfig, run_pipeline
from .sim import SceneConfig, TrialResult, generate_scene, run_sweep

__version__ = "0.1.0"
