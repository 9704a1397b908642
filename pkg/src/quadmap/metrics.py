"""Evaluation metrics and aggregation into method-level rows."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyResults
from .geometry import BBox, EllipsoidParams, iou_2d

METRICS_HEADER = [
    "sweep", "method", "noise_type", "noise_level",
    "success_rate", "iou2d", "e_trans", "e_axe", "n_trials",
]

TRIALS_HEADER = [
    "sweep", "method", "noise_type", "noise_level", "object_id", "seed",
    "success", "iou2d", "e_trans", "e_axe", "error",
]


def metric_iou2d(gt: BBox, pred: BBox) -> float:
    return iou_2d(gt, pred)


def metric_e_trans(gt: EllipsoidParams, pred: EllipsoidParams) -> float:
    return float(np.linalg.norm(gt.t - pred.t))


def metric_e_axe(gt: EllipsoidParams, pred: EllipsoidParams) -> float:
    """Axis error; both inputs use the canonical (nearest-identity) axis order."""
    return float(np.linalg.norm(gt.a - pred.a))


@dataclass
class MetricsRow:
    sweep: str
    method: str
    noise_type: str
    noise_level: float
    success_rate: float
    iou2d: float
    e_trans: float
    e_axe: float
    n_trials: int

    def as_list(self) -> list[str]:
        return [
            self.sweep, self.method, self.noise_type, _fmt(self.noise_level),
            _fmt(self.success_rate), _fmt(self.iou2d), _fmt(self.e_trans),
            _fmt(self.e_axe), str(self.n_trials),
        ]


def _fmt(x: float) -> str:
    # repr round-trips floats exactly, which keeps CSV output byte-stable
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


def aggregate(results: Iterable) -> list[MetricsRow]:
    """One row per (sweep, method, noise type, level).

    Error means are taken over successful trials only; a group without any
    success reports ``nan``.  Row order follows first appearance.
    """
    results = list(results)
    if not results:
        raise EmptyResults("nothing to aggregate")
    groups: dict[tuple, list] = {}
    for r in results:
        groups.setdefault((r.sweep, r.method, r.noise_type, float(r.noise_level)), []).append(r)
    rows = []
    for (sweep, method, nt, level), rs in groups.items():
        ok = [r for r in rs if r.success]
        mean = (lambda xs: float(np.mean(xs)) if xs else float("nan"))
        rows.append(MetricsRow(
            sweep, method, nt, level,
            len(ok) / len(rs),
            mean([r.iou2d for r in ok]),
            mean([r.e_trans for r in ok]),
            mean([r.e_axe for r in ok]),
            len(rs),
        ))
    return rows


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def trials_csv(results: Sequence) -> str:
    """Long-format per-trial table, ready for plotting error curves."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIALS_HEADER)
    for r in results:
        w.writerow([
            r.sweep, r.method, r.noise_type, _fmt(r.noise_level), r.object_id, r.seed,
            int(r.success), _fmt(r.iou2d), _fmt(r.e_trans), _fmt(r.e_axe), r.error,
        ])
    return buf.getvalue()
