"""Scene assembly, point-to-point ICP (full and about-gravity), surface
error statistics and pose errors."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import (
    GeometryError,
    NearSingularityError,
    RigidTransform,
    hat,
    rodrigues,
    so3_log,
    unit_gravity,
)
from .mesh import PointCloud, ShapeDatabase, TriMesh, closest_points, merge_meshes, sample_surface, transform_mesh

# relative slack on the monotone ICP objective, for round-off only
MONOTONE_RTOL = 1e-9
DEFAULT_SAMPLES = 100_000
ICP_POINTS = 5000


class EvaluationError(ValueError):
    pass


class IcpDivergence(ArithmeticError):
    """The ICP objective increased between iterations."""


@dataclass(frozen=True, eq=False)
class SceneMesh:
    """Posed database meshes: (object id, shape id, object-to-world, TriMesh in world)."""

    components: tuple = ()

    @property
    def empty(self) -> bool:
        return not self.components

    @property
    def n_vertices(self) -> int:
        return sum(c[3].n_vertices for c in self.components)

    def mesh(self) -> TriMesh:
        if self.empty:
            raise EvaluationError("scene is empty")
        return merge_meshes([c[3] for c in self.components])


def assemble_scene(poses: dict, db: ShapeDatabase) -> SceneMesh:
    """One posed mesh per entry of ``poses`` (obj id -> (shape id, RigidTransform))."""
    comps = []
    for oid in sorted(poses):
        k, g = poses[oid]
        if k not in db:
            raise EvaluationError(f"object {oid} refers to unknown shape id {k}")
        comps.append((oid, int(k), g, transform_mesh(db.mesh(k), g)))
    return SceneMesh(tuple(comps))


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    history: tuple  # mean squared correspondence distance per iteration
    iterations: int  # number of transform updates
    converged: bool


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=float).reshape(-1, 3)


def _check_rank(p: np.ndarray) -> None:
    if len(p) < 3:
        raise EvaluationError("ICP needs at least 3 points")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if not s[0] > 0 or s[1] <= 1e-9 * s[0]:
        raise EvaluationError("degenerate source: points are collinear or coincident")


def fit_rigid(p: np.ndarray, q: np.ndarray) -> RigidTransform:
    """Least-squares R, t with R p + t ~ q (SVD of the centered covariance)."""
    pm, qm = p.mean(axis=0), q.mean(axis=0)
    H = (p - pm).T @ (q - qm)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, qm - R @ pm)


def fit_rigid_about_axis(p: np.ndarray, q: np.ndarray, gamma) -> RigidTransform:
    """Least-squares fit restricted to rotations about ``gamma``.

    With centered p', q' the optimal angle is atan2(A, B),
    A = sum q'.(gamma x p'), B = sum q'.p' - (q'.gamma)(p'.gamma).
    """
    g = unit_gravity(gamma)
    pm, qm = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - pm, q - qm
    A = float(np.sum(qc * (pc @ hat(g).T)))
    B = float(np.sum(qc * pc) - np.dot(qc @ g, pc @ g))
    R = rodrigues(g, math.atan2(A, B))
    return RigidTransform(R, qm - R @ pm)


class _Target:
    def __init__(self, target):
        if isinstance(target, TriMesh):
            self.mesh = target
        else:
            self.mesh = None
            self.tree = cKDTree(_points(target))
            self.pts = _points(target)

    def closest(self, x: np.ndarray) -> np.ndarray:
        if self.mesh is not None:
            return closest_points(x, self.mesh)[2]
        _, idx = self.tree.query(x)
        return self.pts[idx]


def icp_align(source, target, mode: str = "full", gamma=(0.0, 0.0, -1.0), init: RigidTransform | None = None,
              iters: int = 50, tol: float = 1e-12) -> IcpResult:
    """Point-to-point ICP of ``source`` points onto a mesh or point cloud.

    ``mode`` is "full" or "gravity" (rotation restricted to the gravity axis;
    ``init`` must then be in that subgroup too). Each iteration re-solves the
    transform in closed form from the original source points, so the mean
    squared correspondence distance can only fall; a rise beyond round-off
    raises IcpDivergence. Stops after ``iters`` updates or once an update
    improves the objective by less than ``tol``.
    """
    if mode not in ("full", "gravity"):
        raise ValueError(f"unknown ICP mode {mode!r}")
    p = _points(source)
    _check_rank(p)
    T = init or RigidTransform.identity()
    g = unit_gravity(gamma)
    if mode == "gravity" and not np.allclose(T.R @ g, g, atol=1e-9, rtol=0):
        raise GeometryError("initial rotation is not about the gravity axis")
    tgt = _Target(target)
    history = []
    converged = False
    n_updates = 0
    for _ in range(iters + 1):
        x = T.apply(p)
        q = tgt.closest(x)
        E = float(np.mean(np.sum((x - q) ** 2, axis=1)))
        if history:
            prev = history[-1]
            if E > prev + MONOTONE_RTOL * max(prev, 1e-12):
                raise IcpDivergence(f"ICP objective rose from {prev!r} to {E!r}")
            history.append(E)
            if prev - E < tol:
                converged = True
                break
        else:
            history.append(E)
        if n_updates == iters:
            break
        T = fit_rigid(p, q) if mode == "full" else fit_rigid_about_axis(p, q, g)
        n_updates += 1
    return IcpResult(T, tuple(history), n_updates, converged)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceErrorStats:
    median: float
    mean: float
    std: float
    max: float

    @classmethod
    def of(cls, d) -> "SurfaceErrorStats":
        d = np.asarray(d, dtype=float)
        if d.size == 0:
            raise EvaluationError("no distances")
        return cls(float(np.median(d)), float(np.mean(d)), float(np.std(d)), float(np.max(d)))

    def as_dict(self) -> dict:
        return {"median": self.median, "mean": self.mean, "std": self.std, "max": self.max}


@dataclass(frozen=True, eq=False)
class SurfaceErrorReport:
    stats: SurfaceErrorStats
    alignment: RigidTransform
    icp: IcpResult | None
    distances: np.ndarray = field(repr=False)


def surface_error_report(estimated, ground_truth: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed=0,
                         align: bool = True, mode: str = "full", gamma=(0.0, 0.0, -1.0),
                         init: RigidTransform | None = None, iters: int = 50,
                         icp_points: int = ICP_POINTS) -> SurfaceErrorReport:
    """Sample the estimate, align it (ICP on an evenly strided subset of at
    most ``icp_points`` samples), then measure every sample."""
    est = estimated.mesh() if isinstance(estimated, SceneMesh) else estimated
    if ground_truth.n_faces == 0:
        raise EvaluationError("ground-truth mesh is empty")
    pts = sample_surface(est, n_samples, seed).points
    icp = None
    T = init or RigidTransform.identity()
    if align:
        step = max(1, -(-len(pts) // icp_points))
        icp = icp_align(pts[::step], ground_truth, mode, gamma, init, iters)
        T = icp.transform
    d = closest_points(T.apply(pts), ground_truth)[0]
    return SurfaceErrorReport(SurfaceErrorStats.of(d), T, icp, d)


def surface_error(estimated, ground_truth: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed=0, align: bool = True,
                  **kwargs) -> SurfaceErrorStats:
    """Distances from area-weighted samples of the estimate to the closest
    ground-truth triangles, after optional ICP alignment."""
    return surface_error_report(estimated, ground_truth, n_samples, seed, align, **kwargs).stats


@dataclass(frozen=True)
class PoseError:
    translational: float  # meters
    rotational: float  # radians

    @property
    def rotational_deg(self) -> float:
        return math.degrees(self.rotational)


def rotation_angle(R: np.ndarray) -> float:
    try:
        return float(np.linalg.norm(so3_log(R)))
    except NearSingularityError as e:
        return float(np.linalg.norm(e.value))


def pose_error(est: RigidTransform, gt: RigidTransform) -> PoseError:
    """(|T_gt - T_est|, |log(R_est^T R_gt)|)."""
    return PoseError(float(np.linalg.norm(gt.t - est.t)), rotation_angle(est.R.T @ gt.R))


def match_objects(est: dict, gt: dict) -> list:
    """Pair estimated and ground-truth objects (id -> (shape, RigidTransform))
    by minimum total translation distance. Returns (est id, gt id) pairs."""
    e_ids, g_ids = sorted(est), sorted(gt)
    if not e_ids or not g_ids:
        return []
    C = np.array([[np.linalg.norm(est[e][1].t - gt[g][1].t) for g in g_ids] for e in e_ids])
    rows, cols = linear_sum_assignment(C)
    return sorted((e_ids[r], g_ids[c]) for r, c in zip(rows, cols))


def metrics_csv(metrics: dict) -> str:
    """Flat table: one row per matched object plus a surface-error row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "object", "gt_object", "shape", "gt_shape", "translational_m", "rotational_deg",
                "median_m", "mean_m", "std_m", "max_m"])
    s = metrics.get("surface_error")
    if s is not None:
        w.writerow(["surface", "", "", "", "", "", "", repr(s["median"]), repr(s["mean"]), repr(s["std"]),
                    repr(s["max"])])
    for o in metrics.get("objects", []):
        w.writerow(["pose", o["id"], o["gt_id"], o["shape"], o["gt_shape"], repr(o["final"]["translational_m"]),
                    repr(o["final"]["rotational_deg"]), "", "", "", ""])
    return buf.getvalue()
