"""Projective algebra of ellipsoids.

Ellipsoids are carried around in two forms: the 9-parameter
:class:`EllipsoidParams` (half-axes, centroid, Z-Y-X Euler angles) and the
4x4 homogeneous dual quadric ``Q*``.  A dual quadric projects through a
3x4 camera matrix ``P`` to the dual conic ``C* = P Q* P^T`` whose tangent
lines give the image bounding box.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConic, NotAnEllipsoid, ProjectionDegenerate

SYM_RTOL = 1e-12


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def euler_to_matrix(theta) -> np.ndarray:
    """Rotation for angles ``(theta_x, theta_y, theta_z)``, R = Rz @ Ry @ Rx."""
    (cx, cy, cz), (sx, sy, sz) = np.cos(theta), np.sin(theta)
    return np.array([
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ])


def matrix_to_euler(R) -> np.ndarray:
    z, y, x = Rotation.from_matrix(R).as_euler("ZYX")
    return wrap_angle(np.array([x, y, z]))


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _frozen(a, shape) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(shape)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipsoidParams:
    """Half-axis lengths ``a``, centroid ``t`` and Euler angles ``theta``.

    ``theta = (theta_x, theta_y, theta_z)`` are intrinsic Z-Y-X angles, so
    the orientation is ``Rz(theta_z) Ry(theta_y) Rx(theta_x)``.
    """

    a: np.ndarray
    t: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        a = _frozen(self.a, 3)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError(f"axial lengths must be positive and finite, got {a}")
        t = _frozen(self.t, 3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        theta = _frozen(wrap_angle(np.asarray(self.theta, dtype=float).reshape(3)), 3)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_vector(cls, q) -> "EllipsoidParams":
        q = np.asarray(q, dtype=float).reshape(9)
        return cls(q[:3], q[3:6], q[6:9])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.a, self.t, self.theta])

    @cached_property
    def R(self) -> np.ndarray:
        R = euler_to_matrix(self.theta)
        R.setflags(write=False)
        return R

    def shape_matrix(self) -> np.ndarray:
        """``R diag(a^2) R^T``, the centred 3x3 block of the dual quadric."""
        R = self.R
        return R @ np.diag(self.a**2) @ R.T

    def transformed(self, T) -> "EllipsoidParams":
        """Apply the rigid transform ``T`` (4x4, maps this frame to the new one)."""
        T = np.asarray(T, dtype=float)
        R = T[:3, :3] @ self.R
        return EllipsoidParams(self.a, T[:3, :3] @ self.t + T[:3, 3], matrix_to_euler(R))

    def __eq__(self, other):
        if not isinstance(other, EllipsoidParams):
            return NotImplemented
        return bool(np.array_equal(self.vector, other.vector))

    def __hash__(self):
        return hash(self.vector.tobytes())


@dataclass(frozen=True, eq=False)
class DualQuadric:
    """Homogeneous 4x4 symmetric dual quadric ``Q*``."""

    Q: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float).reshape(4, 4)
        scale = max(np.abs(Q).max(), 1e-300)
        if np.abs(Q - Q.T).max() > SYM_RTOL * scale:
            raise ValueError("dual quadric must be symmetric")
        Q = 0.5 * (Q + Q.T)
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.Q, dtype=dtype)

    def normalized(self) -> "DualQuadric":
        return DualQuadric(normalize_dual_quadric(self.Q))


@dataclass(frozen=True, eq=False)
class DualConic:
    """Homogeneous 3x3 symmetric dual conic ``C*``."""

    C: np.ndarray

    def __post_init__(self):
        C = np.array(self.C, dtype=float).reshape(3, 3)
        scale = max(np.abs(C).max(), 1e-300)
        if np.abs(C - C.T).max() > SYM_RTOL * scale:
            raise ValueError("dual conic must be symmetric")
        C = 0.5 * (C + C.T)
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.C, dtype=dtype)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned image box in pixels, ``x1 < x2`` and ``y1 < y2``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = [float(v) for v in (self.x1, self.y1, self.x2, self.y2)]
        if not all(np.isfinite(vals)):
            raise ValueError(f"bbox coordinates must be finite: {vals}")
        if not (vals[0] < vals[2] and vals[1] < vals[3]):
            raise ValueError(f"degenerate bbox: {vals}")
        for name, v in zip(("x1", "y1", "x2", "y2"), vals):
            object.__setattr__(self, name, v)

    @classmethod
    def from_array(cls, b) -> "BBox":
        x1, y1, x2, y2 = np.asarray(b, dtype=float).reshape(4)
        return cls(x1, y1, x2, y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)])


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera with intrinsics ``K`` and world-to-camera pose ``T_cw``."""

    K: np.ndarray
    T_cw: np.ndarray

    def __post_init__(self):
        K = _frozen(self.K, (3, 3))
        T = _frozen(self.T_cw, (4, 4))
        if np.abs(np.tril(K, -1)).max() > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K must be upper triangular with positive focal lengths")
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("T_cw rotation must be orthonormal with det +1")
        if np.abs(T[3] - [0, 0, 0, 1]).max() > 0:
            raise ValueError("T_cw last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T_cw", T)
        P = K @ T[:3, :]
        P.setflags(write=False)
        object.__setattr__(self, "_P", P)

    @classmethod
    def from_Rt(cls, K, R_cw, t_cw) -> "CameraView":
        T = np.eye(4)
        T[:3, :3] = R_cw
        T[:3, 3] = t_cw
        return cls(K, T)

    @property
    def R(self) -> np.ndarray:
        return self.T_cw[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T_cw[:3, 3]

    @property
    def P(self) -> np.ndarray:
        return self._P

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @cached_property
    def K_inv(self) -> np.ndarray:
        Ki = np.linalg.inv(self.K)
        Ki.setflags(write=False)
        return Ki

    def project_point(self, X) -> np.ndarray:
        P = self.P
        x = P[:, :3] @ np.asarray(X, dtype=float) + P[:, 3]
        return x[:2] / x[2]

    def transformed(self, T) -> "CameraView":
        """Same camera expressed after mapping world points by ``T``."""
        return CameraView(self.K, self.T_cw @ np.linalg.inv(T))


@dataclass(frozen=True, eq=False)
class PlaneH:
    """Homogeneous plane ``(pi1, pi2, pi3, pi4)`` scaled to a unit normal."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float).reshape(4)
        n = np.linalg.norm(pi[:3])
        if not np.isfinite(n) or n < 1e-300:
            raise ValueError("plane normal must be nonzero")
        pi = pi / n
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def normal(self) -> np.ndarray:
        return self.pi[:3]

    @property
    def offset(self) -> float:
        """Signed distance ``Z`` with the plane written as ``n.x = Z``."""
        return -float(self.pi[3])

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.pi, dtype=dtype)


# ---------------------------------------------------------------------------
# Dual quadric composition / decomposition
# ---------------------------------------------------------------------------


def normalize_dual_quadric(Q) -> np.ndarray:
    """Scale so that ``Q[3, 3] == -1``; unit Frobenius norm if that entry is zero."""
    Q = np.asarray(Q, dtype=float)
    Q = 0.5 * (Q + Q.T)
    q44 = Q[3, 3]
    if abs(q44) > 1e-12 * max(np.abs(Q).max(), 1e-300):
        return Q / -q44
    return Q / np.linalg.norm(Q)


def compose_dual_quadric(e: EllipsoidParams) -> DualQuadric:
    T = np.eye(4)
    T[:3, :3] = e.R
    T[:3, 3] = e.t
    Q = T @ np.diag(np.append(e.a**2, -1.0)) @ T.T
    return DualQuadric(Q)


# The 24 proper signed permutation matrices (symmetry group of an ellipsoid frame).
_FRAME_SYMMETRIES = [
    np.diag(s)[:, list(p)]
    for p in itertools.permutations(range(3))
    for s in itertools.product((1.0, -1.0), repeat=3)
    if np.linalg.det(np.diag(s)[:, list(p)]) > 0
]


def _canonical_frame(evals: np.ndarray, evecs: np.ndarray):
    """Pick the axis order/sign whose rotation is closest to the identity."""
    if np.linalg.det(evecs) < 0:
        evecs = evecs * np.array([1.0, 1.0, -1.0])
    best = None
    for S in _FRAME_SYMMETRIES:
        R = evecs @ S
        tr = np.trace(R)
        if best is None or tr > best[0] + 1e-12:
            best = (tr, R, np.abs(S.T) @ evals)
    _, R, lam = best

    # repeated eigenvalues leave a free rotation inside the eigenspace
    for idx in _eigen_clusters(lam):
        if len(idx) < 2:
            continue
        U = R[:, idx]
        Y, _, Zt = np.linalg.svd(U.T @ np.eye(3)[:, idx])
        R[:, idx] = U @ Y @ Zt
    if np.linalg.det(R) < 0:
        R[:, -1] *= -1
    return lam, R


def _eigen_clusters(lam: np.ndarray, rtol: float = 1e-9):
    groups: list[list[int]] = []
    for i in range(3):
        for g in groups:
            if abs(lam[i] - lam[g[0]]) <= rtol * max(abs(lam[g[0]]), 1e-300):
                g.append(i)
                break
        else:
            groups.append([i])
    return groups


def decompose_dual_quadric(Q) -> EllipsoidParams:
    """Recover ellipsoid parameters from a dual quadric.

    The axis order returned is the one whose rotation is nearest the identity
    (smallest rotation angle among the 24 equivalent frames).

    Raises
    ------
    NotAnEllipsoid
        If ``Q`` cannot be scaled to an ellipsoid, i.e. ``Q[3, 3]`` vanishes or
        ``Q33 + t t^T`` is not positive definite.
    """
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise NotAnEllipsoid("non-finite dual quadric")
    scale = np.abs(Q).max()
    if scale == 0 or abs(Q[3, 3]) <= 1e-12 * scale:
        raise NotAnEllipsoid("Q[3,3] vanishes; not a bounded quadric")
    Q = normalize_dual_quadric(Q)
    t = -Q[:3, 3] + 0.0
    S = Q[:3, :3] + np.outer(t, t)
    S = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(S)
    if evals[0] <= 0 or not np.all(np.isfinite(evals)):
        raise NotAnEllipsoid(f"shape block not positive definite (eigenvalues {evals})")
    lam, R = _canonical_frame(evals, evecs)
    return EllipsoidParams(np.sqrt(lam), t, matrix_to_euler(R))


def canonicalize(e: EllipsoidParams) -> EllipsoidParams:
    """The canonical parameters of the same ellipsoid (see :func:`decompose_dual_quadric`)."""
    return decompose_dual_quadric(compose_dual_quadric(e))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_quadric(Q, view: CameraView) -> DualConic:
    P = view.P
    C = P @ np.asarray(Q, dtype=float) @ P.T
    return DualConic(0.5 * (C + C.T))


def conic_center_and_shape(C) -> tuple[np.ndarray, np.ndarray]:
    """Centre ``c`` and 2x2 shape ``S`` of the ellipse encoded by a dual conic.

    After scaling to ``C[2, 2] = -1`` a dual ellipse reads
    ``[[S - c c^T, -c], [-c^T, -1]]``.
    """
    C = np.asarray(C, dtype=float)
    scale = np.abs(C).max()
    if scale == 0 or not np.isfinite(scale) or abs(C[2, 2]) <= 1e-14 * scale:
        raise DegenerateConic("dual conic has no finite centre")
    C = C / -C[2, 2]
    c = -C[:2, 2]
    S = C[:2, :2] + np.outer(c, c)
    return c, 0.5 * (S + S.T)


def conic_bbox(C) -> BBox:
    """Axis-aligned box bounded by the conic's vertical and horizontal tangents.

    A vertical line ``x = u`` is ``l = (1, 0, -u)``; ``l^T C* l = 0`` is a
    quadratic in ``u`` whose two roots are ``c_x +- sqrt(S_xx)``.
    """
    c, S = conic_center_and_shape(C)
    if S[0, 0] <= 0 or S[1, 1] <= 0 or np.linalg.det(S) <= 0:
        raise DegenerateConic("tangency quadratic has no real roots (not a real ellipse)")
    hw, hh = np.sqrt(S[0, 0]), np.sqrt(S[1, 1])
    return BBox(c[0] - hw, c[1] - hh, c[0] + hw, c[1] + hh)


def min_depth(e: EllipsoidParams, view: CameraView) -> float:
    """Smallest camera-frame depth reached by the ellipsoid surface."""
    z_axis = view.R[2]
    depth_c = z_axis @ e.t + view.t[2]
    return float(depth_c - np.sqrt(z_axis @ e.shape_matrix() @ z_axis))


def project_bbox(e: EllipsoidParams, view: CameraView) -> BBox:
    """Bounding box of ``e`` in ``view``.

    Raises :class:`ProjectionDegenerate` when the ellipsoid reaches behind the
    image plane or its outline is not a bounded ellipse.
    """
    if min_depth(e, view) <= 0:
        raise ProjectionDegenerate("ellipsoid not entirely in front of the camera")
    try:
        return conic_bbox(project_quadric(compose_dual_quadric(e), view))
    except (DegenerateConic, ValueError) as exc:
        raise ProjectionDegenerate(str(exc)) from exc


def backproject_bbox_planes(box: BBox, view: CameraView) -> list[PlaneH]:
    """Planes through the camera centre and the four box edges (left, top, right, bottom)."""
    lines = (
        (1.0, 0.0, -box.x1),
        (0.0, 1.0, -box.y1),
        (1.0, 0.0, -box.x2),
        (0.0, 1.0, -box.y2),
    )
    PT = view.P.T
    return [PlaneH(PT @ np.array(l)) for l in lines]


def iou_2d(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(min(1.0, inter / union))
