"""Oracle suites that check the numerical core against independent references.

Each suite draws its own randomized cases from a seeded generator and
returns an :class:`OracleResult` holding the worst observed error.  The CLI
``selftest`` subcommand and the test-suite both run them.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry as geo
from .assoc import brute_force_assignment, hungarian
from .geometry import BBox, CameraView, EllipsoidParams
from .errors import ProjectionDegenerate
from .initialize import build_yaw_system, recover_ellipsoid
from .optimize import (
    ObjectObservation,
    OptimizerConfig,
    PriorSizeTable,
    _Problem,
    cost_gradient,
    optimize_quadric,
    tangent_offset,
    total_cost,
)

K_DEFAULT = np.array([[721.5377, 0.0, 609.5593], [0.0, 721.5377, 172.854], [0.0, 0.0, 1.0]])


@dataclass
class OracleResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: {self.cases} cases, worst {self.worst:.3g} "
                f"(tol {self.tolerance:.3g}){' ' + self.detail if self.detail else ''}")

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "cases": int(self.cases),
                "worst": float(self.worst), "tolerance": float(self.tolerance), "detail": self.detail}


# ---------------------------------------------------------------------------
# Random case generators
# ---------------------------------------------------------------------------


def random_ellipsoid(rng: np.random.Generator, max_angle: float = np.pi, yaw_only: bool = False) -> EllipsoidParams:
    """Distinct half-axes in [0.3, 3]; rotation angle below ``max_angle``."""
    a = rng.uniform(0.3, 3.0, 3)
    t = rng.uniform(-5.0, 5.0, 3)
    if yaw_only:
        theta = [0.0, rng.uniform(-max_angle, max_angle), 0.0]
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()
        theta = geo.matrix_to_euler(R)
    return EllipsoidParams(a, t, theta)


def look_at(K, center, target, up=(0.0, -1.0, 0.0)) -> CameraView:
    """Camera at ``center`` whose optical axis passes through ``target``."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return CameraView.from_Rt(K, R, -R @ np.asarray(center, float))


def random_camera_facing(rng: np.random.Generator, e: EllipsoidParams, K=K_DEFAULT) -> CameraView:
    """A camera 8-20 m from ``e`` looking roughly at its centre."""
    d = rng.normal(size=3)
    d[1] = -abs(d[1]) * 0.3
    d /= np.linalg.norm(d)
    center = e.t + d * rng.uniform(8.0, 20.0)
    target = e.t + rng.normal(scale=0.3, size=3)
    return look_at(K, center, target)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def oracle_roundtrip(n: int = 1000, seed: int = 0, tol: float = 1e-8) -> OracleResult:
    """compose -> decompose recovers parameters.

    Rotations within 40 degrees of the identity are already the canonical
    representative, so parameters must come back unchanged.  Arbitrary
    rotations must reproduce the same dual quadric and axis multiset.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(n):
        if k % 2 == 0:
            e = random_ellipsoid(rng, max_angle=np.deg2rad(40))
            back = geo.decompose_dual_quadric(geo.compose_dual_quadric(e))
            err = np.max(np.abs(back.vector - e.vector))
        else:
            e = random_ellipsoid(rng)
            Q = np.asarray(geo.compose_dual_quadric(e))
            back = geo.decompose_dual_quadric(Q)
            Q2 = np.asarray(geo.compose_dual_quadric(back))
            err = max(np.max(np.abs(Q2 - Q)) / np.max(np.abs(Q)),
                      np.max(np.abs(np.sort(back.a) - np.sort(e.a))))
        worst = max(worst, float(err))
    return OracleResult("roundtrip", worst < tol, n, worst, tol, time.perf_counter() - t0)


def oracle_tangency(n: int = 1000, seed: int = 1, tol: float = 1e-8) -> OracleResult:
    """Planes back-projected from a projected quadric's box are tangent to it.

    The error is ``Pi^T Q* Pi`` with unit-normal planes and ``Q44 = -1``,
    divided by the squared scene scale so it is dimensionless.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    done = 0
    while done < n:
        e = random_ellipsoid(rng)
        view = random_camera_facing(rng, e)
        try:
            box = geo.project_bbox(e, view)
        except ProjectionDegenerate:
            continue
        Q = np.asarray(geo.compose_dual_quadric(e))
        scale = np.max(e.a) ** 2 + e.t @ e.t + view.center @ view.center
        for p in geo.backproject_bbox_planes(box, view):
            pi = np.asarray(p)
            worst = max(worst, abs(pi @ Q @ pi) / scale)
        done += 1
    return OracleResult("tangency", worst < tol, n, worst, tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def reduced_gt_vector(e_r: EllipsoidParams) -> np.ndarray:
    """``(q11, q13, q22, q33, q44)`` of a yaw-only ellipsoid with ``q44 = -1``."""
    Q = np.asarray(geo.compose_dual_quadric(e_r))
    return np.array([Q[0, 0], Q[0, 2], Q[1, 1], Q[2, 2], Q[3, 3]])


def random_yaw_configuration(rng: np.random.Generator, n_views: int = 5):
    """Reference camera at the origin, yaw-only ellipsoid in front of it, and
    ``n_views - 1`` further cameras looking at it from random directions."""
    a = rng.uniform(0.3, 3.0, 3)
    t = np.array([rng.uniform(-4, 4), rng.uniform(-2, 2), rng.uniform(8, 25)])
    e = EllipsoidParams(a, t, [0.0, rng.uniform(-np.pi / 4, np.pi / 4) * 0.99, 0.0])
    views = [CameraView.from_Rt(K_DEFAULT, np.eye(3), np.zeros(3))]
    while len(views) < n_views:
        v = random_camera_facing(rng, e)
        if geo.min_depth(e, v) > 0.5:
            views.append(v)
    return e, views


def oracle_nullspace(n: int = 1000, seed: int = 2, tol: float = 1e-8) -> OracleResult:
    """The GT reduced vector annihilates the row-normalized yaw system, and
    recovering from it returns the GT ellipsoid."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = worst_rec = 0.0
    for _ in range(n):
        e, views = random_yaw_configuration(rng)
        planes = [p for v in views for p in geo.backproject_bbox_planes(geo.project_bbox(e, v), v)]
        M = build_yaw_system(planes, e.t).M
        Mh = M / np.linalg.norm(M, axis=1, keepdims=True)
        v = reduced_gt_vector(e)
        worst = max(worst, float(np.linalg.norm(Mh @ v) / np.linalg.norm(v)))
        rec = recover_ellipsoid(v, e.t)
        worst_rec = max(worst_rec, float(np.max(np.abs(rec.vector - e.vector))))
    ok = worst < tol and worst_rec < 1e-9
    return OracleResult("nullspace", ok, n, worst, tol, time.perf_counter() - t0,
                        f"recovery error {worst_rec:.3g}")


# ---------------------------------------------------------------------------
# Association
# ---------------------------------------------------------------------------


def oracle_hungarian(n: int = 1000, seed: int = 3, max_size: int = 7) -> OracleResult:
    """Hungarian assignment equals the brute-force permutation minimum.

    A quarter of the matrices carry forbidden (infinite) entries; matrices
    with small integer costs exercise ties.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    mismatches = 0
    for k in range(n):
        r, c = rng.integers(1, max_size + 1, 2)
        C = rng.integers(0, 5, (r, c)).astype(float) if k % 3 == 0 else rng.uniform(0, 2.6, (r, c))
        if k % 4 == 0:
            C[rng.random((r, c)) < 0.3] = np.inf
        h, b = hungarian(C), brute_force_assignment(C)
        diff = abs(h.cost - b.cost)
        if len(h.pairs) != len(b.pairs) or diff > 1e-9:
            mismatches += 1
        worst = max(worst, diff)
    return OracleResult("hungarian", mismatches == 0, n, worst, 1e-9, time.perf_counter() - t0,
                        f"{mismatches} mismatches")


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _random_problem(rng: np.random.Generator):
    """Noisy boxes of a car-sized ellipsoid seen from an arc, plus a texture plane."""
    a = np.array([rng.uniform(1.7, 2.3), rng.uniform(0.6, 0.9), rng.uniform(0.7, 1.0)])
    e = EllipsoidParams(a, [rng.uniform(-1, 1), 0.5, 10.0 + rng.uniform(-1, 1)],
                        [0.0, rng.uniform(-0.1, 0.1), 0.0])
    obs = []
    for ang in np.deg2rad(np.linspace(-9, 9, 5)):
        center = np.array([10 * np.sin(ang), -1.65 + 0.5, 10.0 - 10 * np.cos(ang)])
        view = look_at(K_DEFAULT, center, e.t)
        box = geo.project_bbox(e, view).as_array() + rng.normal(scale=3.0, size=4)
        plane = None
        if len(obs) == 2:
            n = e.t - view.center
            n /= np.linalg.norm(n)
            plane = geo.PlaneH(np.append(n, -tangent_offset(e, n) + rng.normal(scale=0.1)))
        obs.append(ObjectObservation(view, BBox.from_array(box), plane))
    start = EllipsoidParams(a * rng.uniform(0.8, 1.2, 3), e.t + rng.normal(scale=0.3, size=3),
                            [0.0, e.theta[1] + rng.normal(scale=0.1), 0.0])
    return e, start, obs


def oracle_gradient(n: int = 20, seed: int = 4, tol: float = 1e-4) -> OracleResult:
    """Solver gradient ``2 J^T W r`` against central differences of total_cost,
    and monotone accepted-step costs."""
    rng = np.random.default_rng(seed)
    table = PriorSizeTable({"car": [2.0, 0.75, 0.85]})
    cfg = OptimizerConfig()
    t0 = time.perf_counter()
    worst = 0.0
    increases = 0
    for k in range(n):
        _, start, obs = _random_problem(rng)
        planar = k % 2 == 0
        prob = _Problem(start, obs, "car", table, cfg, planar)
        x = prob.x0()
        g = cost_gradient(prob, x)
        num = np.empty_like(x)
        for i in range(x.size):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp = total_cost(prob.params(xp), obs, "car", table, cfg).total
            fm = total_cost(prob.params(xm), obs, "car", table, cfg).total
            num[i] = (fp - fm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)))
        _, rep = optimize_quadric(start, obs, "car", table, cfg, planar=planar)
        hist = rep.cost_history
        increases += sum(b > a for a, b in itertools.pairwise(hist))
    return OracleResult("gradient", worst < tol and increases == 0, n, worst, tol,
                        time.perf_counter() - t0, f"{increases} cost increases")


SUITES = {
    "roundtrip": oracle_roundtrip,
    "tangency": oracle_tangency,
    "nullspace": oracle_nullspace,
    "hungarian": oracle_hungarian,
    "gradient": oracle_gradient,
}


def run_all(names=None, seed: int = 0) -> list[OracleResult]:
    """Run the named suites (all by default); ``seed`` offsets every suite's seed."""
    out = []
    for i, name in enumerate(names or SUITES):
        out.append(SUITES[name](seed=seed * len(SUITES) + i))
    return out
