"""Ellipsoid initialization from multi-view bounding boxes.

Three initializers share the same plumbing:

* :func:`init_dqp` (``"tri+yaw"``): triangulate the centroid from box
  centres, then solve a five-unknown linear system that assumes the object
  only rotates about the reference camera's y axis.
* :func:`init_tri` (``"tri"``): triangulate the centroid, then solve for the
  full symmetric 3x3 block of the dual quadric.
* :func:`init_baseline_linear` (``"qslam"``): one SVD over all ten entries of
  the dual quadric, no decoupling.

All linear algebra happens in the frame of the first observing camera; the
result is mapped back to world coordinates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .errors import (
    ConfigError,
    InitFailure,
    InsufficientParallax,
    InvalidShape,
    NotAnEllipsoid,
    ProjectionDegenerate,
    QuadmapError,
    RankDeficient,
    TooFewPlanes,
    TooFewViews,
)
from .geometry import BBox, CameraView, EllipsoidParams, PlaneH


@dataclass
class InitConfig:
    """Tunables shared by the initializers.

    ``rank_ratio`` rejects a shape system whose second-smallest singular
    value is less than ``rank_ratio`` times the smallest; ``parallax_ratio``
    is the same test for the centroid triangulation.  Noisy shape systems on
    short arcs routinely sit at ratios of 2 to 5, so the shape gate only
    catches near-doubled null spaces.

    ``center_iterations`` bounds the Newton iterations that remove the
    box-centre bias from the centroid (0 keeps the raw triangulation).  The
    correction is kept only if it solves its consistency equation to
    ``center_accept`` (relative to the centroid scale) and moves the
    centroid by at most ``max_center_shift`` times the largest half-axis;
    otherwise the uncorrected estimate is returned.  ``precondition`` solves the
    shape systems in the centroid-centred basis with equilibrated columns.
    """

    rank_ratio: float = 1.05
    parallax_ratio: float = 10.0
    center_iterations: int = 20
    center_tol: float = 1e-12
    center_accept: float = 1e-9
    max_center_shift: float = 1.0
    precondition: bool = True

    def __post_init__(self):
        if self.rank_ratio < 0 or self.parallax_ratio < 0:
            raise ConfigError("singular value ratios must be >= 0")
        if self.center_iterations < 0 or self.max_center_shift <= 0:
            raise ConfigError("center_iterations must be >= 0 and max_center_shift > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "InitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown init keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class ObservationSet:
    """Views and boxes of one object; ``reference_frame_id`` indexes ``items``."""

    items: list[tuple[CameraView, BBox]]
    reference_frame_id: int = 0

    def __post_init__(self):
        self.items = list(self.items)
        if not self.items:
            raise TooFewViews("an observation set needs at least one item")
        if not 0 <= self.reference_frame_id < len(self.items):
            raise ValueError("reference_frame_id out of range")

    def __len__(self):
        return len(self.items)

    @property
    def views(self) -> list[CameraView]:
        return [v for v, _ in self.items]

    @property
    def bboxes(self) -> list[BBox]:
        return [b for _, b in self.items]

    @property
    def reference_view(self) -> CameraView:
        return self.items[self.reference_frame_id][0]

    def in_reference_frame(self) -> "ObservationSet":
        T_rw = self.reference_view.T_cw
        return ObservationSet(
            [(v.transformed(T_rw), b) for v, b in self.items], self.reference_frame_id
        )


@dataclass
class YawLinearSystem:
    """Rows of the yaw-constrained tangency system and the centroid used to build them.

    Unknown order: ``(q11, q13, q22, q33, q44)``.
    """

    M: np.ndarray
    t: np.ndarray


@dataclass
class LinearSolution:
    vector: np.ndarray
    singular_values: np.ndarray
    ratio: float


# ---------------------------------------------------------------------------
# Centroid triangulation
# ---------------------------------------------------------------------------


def triangulate_center(
    obs: ObservationSet,
    centers: Sequence[np.ndarray] | None = None,
    *,
    parallax_ratio: float = 10.0,
) -> tuple[np.ndarray, float]:
    """DLT triangulation of box centres.

    Each view contributes ``P[0] - u P[2]`` and ``P[1] - v P[2]``.  Rows are
    built in normalized image coordinates and scaled to unit length before
    the SVD.  The point comes out in the frame the views are expressed in.

    Returns
    -------
    t : ndarray (3,)
    rms : float
        Root-mean-square reprojection residual of the centres, in pixels.
    """
    if len(obs) < 2:
        raise TooFewViews(f"triangulation needs >= 2 views, got {len(obs)}")
    if centers is None:
        centers = [b.center for b in obs.bboxes]
    rows = []
    for view, c in zip(obs.views, centers):
        xn = view.K_inv @ np.array([c[0], c[1], 1.0])
        Pn = view.T_cw[:3]
        for k in (0, 1):
            r = Pn[k] - (xn[k] / xn[2]) * Pn[2]
            rows.append(r / np.linalg.norm(r))
    A = np.asarray(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] <= 1e-10 * s[0] or s[-2] < parallax_ratio * s[-1]:
        raise InsufficientParallax(f"singular values {s} indicate rank deficiency")
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.abs(X).max():
        raise InsufficientParallax("triangulated point at infinity")
    t = X[:3] / X[3]
    if any(v.R[2] @ t + v.t[2] <= 0 for v in obs.views):
        raise InsufficientParallax("triangulated centre lies behind a camera")
    res = [v.project_point(t) - c for v, c in zip(obs.views, centers)]
    return t, float(np.sqrt(np.mean(np.square(res))))


# ---------------------------------------------------------------------------
# Linear systems
# ---------------------------------------------------------------------------


def _planes(obs: ObservationSet) -> list[PlaneH]:
    out = []
    for view, box in obs.items:
        out.extend(geo.backproject_bbox_planes(box, view))
    return out


def build_yaw_system(planes: Sequence[PlaneH], t_rq) -> YawLinearSystem:
    """Tangency rows with a known centroid and yaw-only rotation.

    For each plane the row holds the coefficients of ``Pi^T Q* Pi = 0`` in
    ``(q11, q13, q22, q33, q44)``; the entries fixed by the centroid
    (``q12 = tx ty q44``, ``q14 = tx q44`` ...) are folded into the ``q44``
    column.
    """
    if len(planes) < 5:
        raise TooFewPlanes(f"need >= 5 planes, got {len(planes)}")
    tx, ty, tz = np.asarray(t_rq, dtype=float)
    P = np.array([np.asarray(p, dtype=float) for p in planes])
    p1, p2, p3, p4 = P.T
    last = (
        p4**2
        + 2 * p1 * p2 * tx * ty
        + 2 * p1 * p4 * tx
        + 2 * p2 * p3 * ty * tz
        + 2 * p2 * p4 * ty
        + 2 * p3 * p4 * tz
    )
    M = np.column_stack([p1**2, 2 * p1 * p3, p2**2, p3**2, last])
    return YawLinearSystem(M, np.array([tx, ty, tz]))


def _yaw_basis(t) -> np.ndarray:
    """Maps centred unknowns ``(s11, s13, s22, s33, w)`` to ``(q11, q13, q22, q33, q44)``."""
    tx, ty, tz = t
    A = np.eye(5)
    A[:4, 4] = [tx * tx, tx * tz, ty * ty, tz * tz]
    return A


def _null_vector(M: np.ndarray, rank_ratio: float, equilibrate: bool = False) -> LinearSolution:
    """Right singular vector of the smallest singular value of row-normalized ``M``.

    With ``equilibrate`` the columns are also scaled to unit norm before the
    SVD and the vector is mapped back.  Without it a column with tiny entries
    (depth terms seen from a short baseline) makes its unit vector an almost
    free null direction, and the homogeneous scale then comes out near zero
    with an arbitrary sign.
    """
    norms = np.linalg.norm(M, axis=1)
    keep = norms > 0
    Mn = M[keep] / norms[keep, None]
    n = M.shape[1]
    if Mn.shape[0] < n - 1:
        raise TooFewPlanes(f"{Mn.shape[0]} usable rows for {n} homogeneous unknowns")
    d = np.ones(n)
    if equilibrate:
        d = np.linalg.norm(Mn, axis=0)
        d[d == 0] = 1.0
        Mn = Mn / d
    _, s, Vt = np.linalg.svd(Mn)
    if Mn.shape[0] < n:
        s = np.append(s, 0.0)
    ratio = np.inf if s[-1] == 0 else s[-2] / s[-1]
    if s[-2] <= 1e-12 * s[0] or ratio < rank_ratio:
        raise RankDeficient(f"singular value ratio {ratio:.3g} below {rank_ratio}")
    v = Vt[-1] / d
    return LinearSolution(v / np.linalg.norm(v), s, float(ratio))


def solve_yaw_system(
    sys: YawLinearSystem, *, rank_ratio: float = 1.05, precondition: bool = True
) -> LinearSolution:
    """Null vector of the yaw system, sign-fixed so ``q44 < 0``.

    With ``precondition`` the SVD runs in the centroid-centred basis (same
    null space, far better column scaling since ``q33`` otherwise carries
    ``-tz^2``) with equilibrated columns; the result is mapped back to the
    ``(q11 .. q44)`` basis.
    """
    if sys.M.shape[0] < 5:
        raise TooFewPlanes(f"need >= 5 rows, got {sys.M.shape[0]}")
    if precondition:
        A = _yaw_basis(sys.t)
        sol = _null_vector(sys.M @ A, rank_ratio, equilibrate=True)
        v = A @ sol.vector
    else:
        sol = _null_vector(sys.M, rank_ratio)
        v = sol.vector
    v = v / np.linalg.norm(v)
    if v[4] > 0:
        v = -v
    return LinearSolution(v, sol.singular_values, sol.ratio)


def recover_ellipsoid(v, t_rq) -> EllipsoidParams:
    """Yaw angle and half-axes from the reduced dual vector and centroid.

    ``Q1, Q3, Q8`` are the x-z block of ``R D R^T`` and ``Q2 = a_y^2``;
    the yaw is ``atan(2 Q3 / (Q8 - Q1)) / 2`` and ``a_x^2, a_z^2`` follow by
    rotating that block back to the object frame.
    """
    q11, q13, q22, q33, q44 = np.asarray(v, dtype=float)
    if q44 == 0 or not np.isfinite(q44):
        raise InvalidShape("q44 vanishes")
    tx, ty, tz = np.asarray(t_rq, dtype=float)
    Q1 = -q11 / q44 + tx * tx
    Q2 = -q22 / q44 + ty * ty
    Q3 = -q13 / q44 + tx * tz
    Q8 = -q33 / q44 + tz * tz
    if not Q2 > 0:
        raise InvalidShape(f"Q2 = {Q2:.4g} <= 0")
    den = Q8 - Q1
    if abs(den) <= 1e-15 * (abs(Q1) + abs(Q8)):
        theta = 0.0 if abs(Q3) <= 1e-15 * (abs(Q1) + abs(Q8)) else np.pi / 4
    else:
        theta = 0.5 * np.arctan(2 * Q3 / den)
    c, s = np.cos(theta), np.sin(theta)
    ax2 = abs(c * c * Q1 - 2 * c * s * Q3 + s * s * Q8)
    az2 = abs(s * s * Q1 + 2 * c * s * Q3 + c * c * Q8)
    if not (ax2 > 0 and az2 > 0):
        raise InvalidShape("non-positive axis")
    return EllipsoidParams(np.sqrt([ax2, Q2, az2]), [tx, ty, tz], [0.0, theta, 0.0])


def build_full_block_system(planes: Sequence[PlaneH], t_rq) -> np.ndarray:
    """Tangency rows with known centroid; unknowns ``(b11, b12, b13, b22, b23, b33, q44)``."""
    if len(planes) < 6:
        raise TooFewPlanes(f"need >= 6 planes, got {len(planes)}")
    t = np.asarray(t_rq, dtype=float)
    P = np.array([np.asarray(p, dtype=float) for p in planes])
    p1, p2, p3, p4 = P.T
    last = p4**2 + 2 * p4 * (P[:, :3] @ t)
    return np.column_stack(
        [p1**2, 2 * p1 * p2, 2 * p1 * p3, p2**2, 2 * p2 * p3, p3**2, last]
    )


def _full_block_basis(t) -> np.ndarray:
    A = np.eye(7)
    A[:6, 6] = [t[0] * t[0], t[0] * t[1], t[0] * t[2], t[1] * t[1], t[1] * t[2], t[2] * t[2]]
    return A


def build_quadric_system(planes: Sequence[PlaneH]) -> np.ndarray:
    """Rows over all ten entries ``(q11, q12, q13, q14, q22, q23, q24, q33, q34, q44)``."""
    P = np.array([np.asarray(p, dtype=float) for p in planes])
    p1, p2, p3, p4 = P.T
    return np.column_stack(
        [p1**2, 2 * p1 * p2, 2 * p1 * p3, 2 * p1 * p4, p2**2,
         2 * p2 * p3, 2 * p2 * p4, p3**2, 2 * p3 * p4, p4**2]
    )


def _quadric_from_vector(v) -> np.ndarray:
    q11, q12, q13, q14, q22, q23, q24, q33, q34, q44 = v
    return np.array(
        [[q11, q12, q13, q14], [q12, q22, q23, q24], [q13, q23, q33, q34], [q14, q24, q34, q44]]
    )


# ---------------------------------------------------------------------------
# Validity
# ---------------------------------------------------------------------------


def is_valid_ellipsoid(candidate, views: Sequence[CameraView] | None = None) -> bool:
    """True for a real ellipsoid with positive finite axes whose centre lies
    in front of at least one of ``views`` (if given)."""
    try:
        if isinstance(candidate, EllipsoidParams):
            e = candidate
        else:
            e = geo.decompose_dual_quadric(np.asarray(candidate, dtype=float))
    except (NotAnEllipsoid, ValueError):
        return False
    if not (np.all(np.isfinite(e.a)) and np.all(e.a > 0) and np.all(np.isfinite(e.t))):
        return False
    if views:
        return any(v.R[2] @ e.t + v.t[2] > 0 for v in views)
    return True


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def _yaw_solve(planes: Sequence[PlaneH], t: np.ndarray, cfg: InitConfig) -> EllipsoidParams:
    sys = build_yaw_system(planes, t)
    sol = solve_yaw_system(sys, rank_ratio=cfg.rank_ratio, precondition=cfg.precondition)
    return recover_ellipsoid(sol.vector, t)


def _block_solve(planes: Sequence[PlaneH], t: np.ndarray, cfg: InitConfig) -> EllipsoidParams:
    M = build_full_block_system(planes, t)
    if cfg.precondition:
        A = _full_block_basis(t)
        v = A @ _null_vector(M @ A, cfg.rank_ratio, equilibrate=True).vector
    else:
        v = _null_vector(M, cfg.rank_ratio).vector
    b11, b12, b13, b22, b23, b33, q44 = v
    Q = np.empty((4, 4))
    Q[:3, :3] = [[b11, b12, b13], [b12, b22, b23], [b13, b23, b33]]
    Q[:3, 3] = Q[3, :3] = t * q44
    Q[3, 3] = q44
    e = geo.decompose_dual_quadric(Q)
    # decomposition re-derives the centroid from Q; keep the triangulated one exactly
    return EllipsoidParams(e.a, t, e.theta)


def _decoupled_init(
    obs: ObservationSet,
    solve: Callable[[Sequence[PlaneH], np.ndarray, InitConfig], EllipsoidParams],
    cfg: InitConfig,
) -> EllipsoidParams:
    obs_r = obs.in_reference_frame()
    raw = [b.center for b in obs_r.bboxes]
    t0, _ = triangulate_center(obs_r, raw, parallax_ratio=cfg.parallax_ratio)
    # the back-projected planes do not depend on the centroid; build them once
    planes = _planes(obs_r)
    e0 = solve(planes, t0, cfg)
    if cfg.center_iterations <= 0:
        return e0
    return _correct_center(obs_r, raw, e0, lambda t: solve(planes, t, cfg), cfg)


def _correct_center(obs_r, raw, e0, solve, cfg) -> EllipsoidParams:
    """Remove the box-centre bias from the triangulated centroid.

    A box centre is not the image of the centroid.  Given a shape estimate
    the offset is predictable, so the consistent centroid is a root of
    ``G(t) = tri(raw - offset(solve(t))) - t``.  The map has one slow
    direction (depth against depth extent) on short baselines, hence a
    quasi-Newton solve (finite-difference Jacobian, then Broyden updates)
    rather than plain fixed-point steps.

    Noisy boxes often leave ``G`` without a root.  Any stationary point of
    ``|G|`` is then poorly determined along the slow direction and is less
    accurate than the uncorrected estimate, so ``e0`` is returned unless a
    root is found.
    """

    def fixed_point(t):
        e = solve(t)
        offsets = [geo.project_bbox(e, v).center - v.project_point(t) for v in obs_r.views]
        t_new, _ = triangulate_center(
            obs_r, [c - d for c, d in zip(raw, offsets)], parallax_ratio=cfg.parallax_ratio
        )
        return t_new - t, e

    t = e0.t.copy()
    try:
        g, e = fixed_point(t)
    except QuadmapError:
        return e0
    scale = max(1.0, float(np.linalg.norm(t)))
    h = 1e-6 * scale

    def jacobian(t, g):
        return np.column_stack([(fixed_point(t + h * ei)[0] - g) / h for ei in np.eye(3)])

    try:
        J, fresh = jacobian(t, g), True
    except QuadmapError:
        return e0
    for _ in range(cfg.center_iterations):
        gn = np.linalg.norm(g)
        if gn < cfg.center_tol * scale:
            break
        try:
            step = -np.linalg.solve(J, g)
        except np.linalg.LinAlgError:
            step = g
        for _ in range(8):
            try:
                g_new, e_new = fixed_point(t + step)
            except QuadmapError:
                step = 0.5 * step
                continue
            if np.linalg.norm(g_new) < gn:
                break
            step = 0.5 * step
        else:
            if fresh:
                break
            # the secant model went stale; rebuild it once before giving up
            try:
                J, fresh = jacobian(t, g), True
            except QuadmapError:
                break
            continue
        # Broyden rank-one update keeps the model without new difference quotients
        J = J + np.outer(g_new - g - J @ step, step) / (step @ step)
        fresh = False
        t, g, e = t + step, g_new, e_new
    if np.linalg.norm(g) > cfg.center_accept * scale:
        return e0
    if np.linalg.norm(t - e0.t) > cfg.max_center_shift * float(np.max(e0.a)):
        return e0
    return e


def _finish(e_r: EllipsoidParams, obs: ObservationSet) -> EllipsoidParams:
    e_w = e_r.transformed(np.linalg.inv(obs.reference_view.T_cw))
    if not is_valid_ellipsoid(e_w, obs.views):
        raise InitFailure("estimate is not a valid ellipsoid in front of the cameras")
    return e_w


def init_dqp(obs: ObservationSet, cfg: InitConfig | None = None) -> EllipsoidParams:
    """Decoupled initialization: triangulated centroid plus yaw-only shape solve."""
    cfg = cfg or InitConfig()
    try:
        return _finish(_decoupled_init(obs, _yaw_solve, cfg), obs)
    except InitFailure:
        raise
    except (QuadmapError, np.linalg.LinAlgError, ValueError) as exc:
        raise InitFailure(f"tri+yaw: {exc}") from exc


def init_tri(obs: ObservationSet, cfg: InitConfig | None = None) -> EllipsoidParams:
    """Triangulated centroid plus an unconstrained 3x3 shape block."""
    cfg = cfg or InitConfig()
    try:
        return _finish(_decoupled_init(obs, _block_solve, cfg), obs)
    except InitFailure:
        raise
    except (QuadmapError, np.linalg.LinAlgError, ValueError) as exc:
        raise InitFailure(f"tri: {exc}") from exc


def init_baseline_linear(obs: ObservationSet, cfg: InitConfig | None = None) -> EllipsoidParams:
    """Single SVD over the ten dual-quadric entries (no decoupling)."""
    cfg = cfg or InitConfig()
    try:
        if len(obs) < 3:
            raise TooFewViews(f"the full linear solve needs >= 3 views, got {len(obs)}")
        obs_r = obs.in_reference_frame()
        sol = _null_vector(build_quadric_system(_planes(obs_r)), cfg.rank_ratio)
        e_r = geo.decompose_dual_quadric(_quadric_from_vector(sol.vector))
        return _finish(e_r, obs)
    except InitFailure:
        raise
    except (QuadmapError, np.linalg.LinAlgError, ValueError) as exc:
        raise InitFailure(f"qslam: {exc}") from exc


METHODS: dict[str, Callable[..., EllipsoidParams]] = {
    "tri+yaw": init_dqp,
    "tri": init_tri,
    "qslam": init_baseline_linear,
}
