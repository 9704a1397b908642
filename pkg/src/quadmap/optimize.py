"""Levenberg-Marquardt refinement of an ellipsoid against robust residuals.

Three residual families enter the cost, each whitened by its information
matrix and passed through a Huber kernel:

* detection: projected box minus detected box, 4 values in pixels
* prior axes: class prior half-axes minus estimated half-axes, metres
* texture plane: fitted plane offset minus the offset of the ellipsoid's
  tangent plane with the same normal, metres

Camera poses are fixed inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import geometry as geo
from .errors import ConfigError, NoActiveResiduals, ProjectionDegenerate
from .geometry import BBox, CameraView, EllipsoidParams, PlaneH

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectObservation:
    """One detection of the object.

    ``texture_plane`` (optional) is a plane fitted to the visible surface.
    Its normal is flipped on construction so that it points away from the
    camera, which makes ``plane.offset`` the plane distance ``Z`` along ``n``.
    """

    view: CameraView
    bbox: BBox
    texture_plane: PlaneH | None = None
    at_image_edge: bool = False

    def __post_init__(self):
        p = self.texture_plane
        if p is not None and p.normal @ self.view.center - p.offset > 0:
            object.__setattr__(self, "texture_plane", PlaneH(-np.asarray(p)))


@dataclass
class PriorSizeTable:
    """Class label -> prior half-axes (metres)."""

    sizes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for k, v in dict(self.sizes).items():
            a = np.asarray(v, dtype=float).reshape(3)
            if not np.all(np.isfinite(a)) or np.any(a <= 0):
                raise ConfigError(f"prior size for {k!r} must be positive, got {a}")
            clean[str(k)] = a
        self.sizes = clean

    def __contains__(self, cls) -> bool:
        return cls in self.sizes

    def __getitem__(self, cls) -> np.ndarray:
        return self.sizes[cls]

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorSizeTable":
        return cls(dict(d))

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.sizes.items()}


def _spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T) or np.any(np.linalg.eigvalsh(M) <= 0):
        raise ConfigError(f"{name} must be symmetric positive definite")
    return M


@dataclass
class OptimizerConfig:
    """Weights, kernels and stopping rules.

    Defaults assume 4 px detection noise, 0.3 m prior-size spread and 0.5 m
    texture-plane noise; Huber deltas are in whitened units.
    """

    omega_b: np.ndarray = field(default_factory=lambda: np.eye(4) / 4.0**2)
    omega_a: np.ndarray = field(default_factory=lambda: np.eye(3) / 0.3**2)
    omega_p: np.ndarray = field(default_factory=lambda: np.eye(1) / 0.5**2)
    delta_b: float = 1.0
    delta_a: float = 1.0
    delta_p: float = 1.0
    max_iterations: int = 100
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    initial_damping: float = 1e-3
    fd_step: float = 1e-6
    planar_classes: tuple[str, ...] = ("car",)

    def __post_init__(self):
        self.omega_b = _spd(self.omega_b, "omega_b")
        self.omega_a = _spd(self.omega_a, "omega_a")
        self.omega_p = _spd(self.omega_p, "omega_p")
        if self.omega_b.shape != (4, 4) or self.omega_a.shape != (3, 3) or self.omega_p.shape != (1, 1):
            raise ConfigError("information matrices must be 4x4, 3x3 and 1x1")
        if min(self.delta_b, self.delta_a, self.delta_p) <= 0:
            raise ConfigError("Huber deltas must be positive")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        self.planar_classes = tuple(self.planar_classes)

    def to_dict(self) -> dict:
        return {
            "omega_b": self.omega_b.tolist(), "omega_a": self.omega_a.tolist(),
            "omega_p": self.omega_p.tolist(), "delta_b": self.delta_b,
            "delta_a": self.delta_a, "delta_p": self.delta_p,
            "max_iterations": self.max_iterations, "grad_tol": self.grad_tol,
            "step_tol": self.step_tol, "cost_tol": self.cost_tol,
            "initial_damping": self.initial_damping, "fd_step": self.fd_step,
            "planar_classes": list(self.planar_classes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown optimizer keys {sorted(extra)}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------


def huber(f: float, delta: float) -> float:
    """Huber kernel on a squared whitened norm ``f``."""
    d2 = delta * delta
    return f if f <= d2 else 2.0 * delta * np.sqrt(f) - d2


def huber_weight(f: float, delta: float) -> float:
    """``d huber / d f``; the IRLS weight."""
    return 1.0 if f <= delta * delta else delta / np.sqrt(f)


def residual_detection(e: EllipsoidParams, obs: ObjectObservation) -> np.ndarray:
    """Projected box minus detected box ``(x1, y1, x2, y2)`` in pixels."""
    return geo.project_bbox(e, obs.view).as_array() - obs.bbox.as_array()


def residual_prior_axes(e: EllipsoidParams, cls, table: PriorSizeTable) -> np.ndarray:
    """Prior half-axes of ``cls`` minus the estimate; raises ``KeyError`` if absent."""
    return table[cls] - e.a


def tangent_offset(e: EllipsoidParams, n) -> float:
    """Offset of the tangent plane with unit normal ``n`` on the ``-n`` side."""
    n = np.asarray(n, dtype=float)
    return float(n @ e.t - np.sqrt(n @ e.shape_matrix() @ n))


def residual_texture_plane(e: EllipsoidParams, plane: PlaneH) -> float:
    """Texture-plane offset minus the matching tangent-plane offset.

    ``plane``'s normal must point away from the camera (see
    :class:`ObjectObservation`); the residual is zero when the plane touches
    the camera-facing side of the ellipsoid.
    """
    return float(plane.offset - tangent_offset(e, plane.normal))


@dataclass
class _Term:
    kind: str
    r: np.ndarray
    omega: np.ndarray
    delta: float

    @property
    def f(self) -> float:
        return float(self.r @ self.omega @ self.r)


@dataclass
class CostBreakdown:
    detection: float = 0.0
    prior: float = 0.0
    plane: float = 0.0
    n_detection: int = 0
    n_inactive: int = 0
    n_edge: int = 0

    @property
    def total(self) -> float:
        return self.detection + self.prior + self.plane


def _prior_active(cls, table) -> bool:
    if table is None or cls is None:
        return False
    if cls not in table:
        log.warning("no prior size for class %r; prior term skipped", cls)
        return False
    return True


def _terms(e, observations, cls, table, cfg, use_prior, active=None):
    """Residual terms at ``e``.

    ``active`` (a set of observation indices) freezes which detections take
    part, so finite differences compare like with like.
    """
    terms, bd = [], CostBreakdown()
    for i, obs in enumerate(observations):
        if obs.at_image_edge:
            bd.n_edge += 1
            continue
        if active is not None and i not in active:
            continue
        try:
            r = residual_detection(e, obs)
        except ProjectionDegenerate:
            if active is not None:
                raise
            bd.n_inactive += 1
            continue
        terms.append((i, _Term("detection", r, cfg.omega_b, cfg.delta_b)))
        bd.n_detection += 1
        if obs.texture_plane is not None:
            rp = np.array([residual_texture_plane(e, obs.texture_plane)])
            terms.append((i, _Term("plane", rp, cfg.omega_p, cfg.delta_p)))
    if use_prior:
        terms.append((-1, _Term("prior", residual_prior_axes(e, cls, table), cfg.omega_a, cfg.delta_a)))
    for _, t in terms:
        v = huber(t.f, t.delta)
        setattr(bd, t.kind, getattr(bd, t.kind) + v)
    return terms, bd


def total_cost(
    e: EllipsoidParams,
    observations: Sequence[ObjectObservation],
    cls=None,
    table: PriorSizeTable | None = None,
    cfg: OptimizerConfig | None = None,
) -> CostBreakdown:
    """Sum of Huber-robustified whitened residual norms, with per-term parts."""
    cfg = cfg or OptimizerConfig()
    terms, bd = _terms(e, observations, cls, table, cfg, _prior_active(cls, table))
    if not terms:
        raise NoActiveResiduals("no residual term is active")
    return bd


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass
class OptimizeReport:
    iterations: int
    converged: bool
    status: str
    initial_cost: float
    final_cost: float
    grad_norm: float
    breakdown: CostBreakdown
    cost_history: list[float]
    planar: bool


_PLANAR_IDX = np.array([0, 1, 2, 3, 4, 5, 7])


class _Problem:
    """Maps the free parameter vector to residuals for a fixed active set."""

    def __init__(self, e0, observations, cls, table, cfg, planar):
        self.obs, self.cls, self.table, self.cfg = observations, cls, table, cfg
        self.use_prior = _prior_active(cls, table)
        self.base = e0.vector.copy()
        self.idx = _PLANAR_IDX if planar else np.arange(9)

    def params(self, x) -> EllipsoidParams:
        q = self.base.copy()
        q[self.idx] = x
        return EllipsoidParams.from_vector(q)

    def x0(self) -> np.ndarray:
        return self.base[self.idx].copy()

    def terms(self, x, active=None):
        return _terms(self.params(x), self.obs, self.cls, self.table, self.cfg, self.use_prior, active)

    def stacked(self, x, active):
        terms, _ = self.terms(x, active)
        return np.concatenate([t.r for _, t in terms])

    def linearize(self, x):
        """Residuals, central-difference Jacobian, IRLS weights, cost."""
        terms, bd = self.terms(x)
        if not terms:
            raise NoActiveResiduals("no residual term is active")
        active = {i for i, _ in terms if i >= 0}
        r = np.concatenate([t.r for _, t in terms])
        J = np.empty((r.size, x.size))
        for k in range(x.size):
            h = self.cfg.fd_step * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            J[:, k] = (self.stacked(xp, active) - self.stacked(xm, active)) / (2 * h)
        # block-diagonal weighted information, one block per term
        W = np.zeros((r.size, r.size))
        o = 0
        for _, t in terms:
            m = t.r.size
            W[o:o + m, o:o + m] = huber_weight(t.f, t.delta) * t.omega
            o += m
        return r, J, W, bd


def cost_gradient(prob: _Problem, x) -> np.ndarray:
    """Gradient of the robust cost as the solver sees it: ``2 J^T W r``."""
    r, J, W, _ = prob.linearize(x)
    return 2.0 * J.T @ W @ r


def _try_cost(prob, x) -> float:
    try:
        _, bd = prob.terms(x)
    except ValueError:
        # non-positive axes: EllipsoidParams refuses them
        return np.inf
    if bd.n_detection == 0 and not prob.use_prior:
        return np.inf
    return bd.total


def optimize_quadric(
    e0: EllipsoidParams,
    observations: Sequence[ObjectObservation],
    cls=None,
    table: PriorSizeTable | None = None,
    cfg: OptimizerConfig | None = None,
    *,
    planar: bool | None = None,
) -> tuple[EllipsoidParams, OptimizeReport]:
    """Refine ``e0`` by damped Gauss-Newton on the IRLS-weighted residuals.

    Steps that raise the cost, or drive an axis non-positive, are rejected
    and the damping grows tenfold.  With ``planar`` (default: ``cls`` in
    ``cfg.planar_classes``) only yaw is free among the angles.  Hitting
    ``max_iterations`` returns the best estimate with ``converged=False``.
    The result is in canonical form whenever a step was taken.
    """
    cfg = cfg or OptimizerConfig()
    if planar is None:
        planar = cls in cfg.planar_classes
    prob = _Problem(e0, list(observations), cls, table, cfg, planar)
    x = prob.x0()
    r, J, W, bd = prob.linearize(x)
    cost = bd.total
    initial = cost
    history = [cost]
    lam = cfg.initial_damping
    g = 2.0 * J.T @ W @ r
    status, converged, it = "max_iterations", False, 0
    while it < cfg.max_iterations:
        if np.linalg.norm(g) < cfg.grad_tol:
            status, converged = "gradient", True
            break
        H = J.T @ W @ J
        D = np.diag(np.maximum(np.diag(H), 1e-12))
        accepted = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(H + lam * D, -J.T @ W @ r)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_cost = _try_cost(prob, x + step)
            if new_cost <= cost:
                accepted = True
                break
            lam *= 10.0
        it += 1
        if not accepted:
            status, converged = "stalled", True
            break
        x_prev, cost_prev = x, cost
        x = x + step
        lam = max(lam / 10.0, 1e-12)
        r, J, W, bd = prob.linearize(x)
        cost = bd.total
        history.append(cost)
        g = 2.0 * J.T @ W @ r
        if np.linalg.norm(step) < cfg.step_tol * (np.linalg.norm(x_prev) + cfg.step_tol):
            status, converged = "step", True
            break
        if cost_prev - cost <= cfg.cost_tol * max(cost_prev, 1e-300):
            status, converged = "cost", True
            break
    report = OptimizeReport(
        it, converged, status, initial, cost, float(np.linalg.norm(g)), bd, history, planar
    )
    e = prob.params(x)
    if len(history) > 1:
        # Euler steps can wander to an equivalent axis order; report the canonical one
        e = geo.canonicalize(e)
    return e, report
