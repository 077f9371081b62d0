"""Rigid-body primitives: SO(3)/SE(3), rotation about gravity, and the
object pose chart (bearing, log depth, azimuth) anchored to a camera frame.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis).
* ``RigidTransform`` maps points from its source frame into its target frame,
  e.g. ``g_ic`` maps camera coordinates into the inertial frame.
* Azimuth is a rotation about the gravity direction in the inertial frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-6
PI_SINGULAR_TOL = 1e-6
# below this angle the log map uses the first-order branch
SMALL_ANGLE = 1e-10
# above pi - this, the axis comes from the symmetric part
SYMMETRIC_BRANCH = 1e-3


class GeometryError(ValueError):
    """Invalid geometric input (non-unit axis, non-rotation matrix, ...)."""


class NearSingularityError(ArithmeticError):
    """Log map evaluated within ``PI_SINGULAR_TOL`` of a half turn.

    ``value`` carries a best-effort rotation vector whose sign is arbitrary.
    """

    def __init__(self, message: str, value: np.ndarray):
        super().__init__(message)
        self.value = value


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


def wrap_angle(theta):
    """Wrap to [0, 2pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod returns exactly 2pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def angle_diff(a, b):
    """Wrapped distance min(|a-b|, 2pi-|a-b|), in [0, pi]."""
    d = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), TWO_PI))
    return np.minimum(d, TWO_PI - d)


def unit_gravity(gamma) -> np.ndarray:
    """Validate and normalize a gravity direction."""
    g = np.asarray(gamma, dtype=float).reshape(3)
    n = float(np.linalg.norm(g))
    if not np.isfinite(n) or abs(n - 1.0) > UNIT_TOL:
        raise GeometryError(f"gravity direction must be unit norm, got |gamma|={n:.3g}")
    return g / n


def rodrigues(gamma, theta: float) -> np.ndarray:
    """Rotation by ``theta`` about the unit axis ``gamma``:
    I + sin(theta) G + (1 - cos(theta)) G^2 with G = hat(gamma)."""
    G = hat(unit_gravity(gamma))
    return np.eye(3) + math.sin(theta) * G + (1.0 - math.cos(theta)) * (G @ G)


def rodrigues_batch(gamma, theta: np.ndarray) -> np.ndarray:
    """Vectorized ``rodrigues`` over an array of angles, shape (N, 3, 3)."""
    G = hat(unit_gravity(gamma))
    G2 = G @ G
    theta = np.asarray(theta, dtype=float)
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    return np.eye(3)[None] + s * G[None] + c * G2[None]


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (log map followed by vee).

    Raises NearSingularityError within 1e-6 rad of a half turn, where the
    axis sign is not determined by ``R``.
    """
    R = np.asarray(R, dtype=float)
    w = vee(R - R.T) * 0.5  # sin(angle) * axis
    s = float(np.linalg.norm(w))
    c = (float(np.trace(R)) - 1.0) * 0.5
    angle = math.atan2(s, c)
    if angle < SMALL_ANGLE:
        return w
    if math.pi - angle > SYMMETRIC_BRANCH:
        return w * (angle / s)
    # near pi: (R + R^T)/2 = cos(a) I + (1 - cos(a)) u u^T
    S = 0.5 * (R + R.T)
    M = (S - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(M)))
    u = M[:, i] / math.sqrt(max(M[i, i], 1e-300))
    u /= np.linalg.norm(u)
    if np.dot(u, w) < 0.0:
        u = -u
    value = u * angle
    if math.pi - angle < PI_SINGULAR_TOL:
        raise NearSingularityError(f"rotation angle {angle!r} within {PI_SINGULAR_TOL} of pi", value)
    return value


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def validate(self, tol: float = ORTHO_TOL) -> "RigidTransform":
        if not is_rotation(self.R, tol):
            raise GeometryError("rotation part is not in SO(3)")
        if not np.all(np.isfinite(self.t)):
            raise GeometryError("translation is not finite")
        return self

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol, rtol=0) and np.allclose(self.t, other.t, atol=atol, rtol=0))

    def __repr__(self):
        return f"RigidTransform(R={self.R.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class PoseParams:
    """Object pose chart relative to a reference camera.

    ``x``, ``y`` are the normalized-image bearing of the object origin,
    ``rho`` its log depth and ``theta`` the azimuth about gravity.
    """

    x: float
    y: float
    rho: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def depth(self) -> float:
        return math.exp(self.rho)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.rho, self.theta])

    @classmethod
    def from_array(cls, a) -> "PoseParams":
        x, y, rho, theta = (float(v) for v in a)
        return cls(x, y, rho, theta)


def centroid_in_camera(x, y, rho) -> np.ndarray:
    """exp(rho) * [x, y, 1]; broadcasts over arrays."""
    z = np.exp(np.asarray(rho, dtype=float))
    return np.stack(np.broadcast_arrays(z * x, z * y, z), axis=-1)


def object_to_inertial(p: PoseParams, ref_cam: RigidTransform, gamma) -> RigidTransform:
    """g_io for pose chart ``p`` anchored at camera pose ``ref_cam`` (g_ic(t_r))."""
    T_co = centroid_in_camera(p.x, p.y, p.rho)
    return RigidTransform(rodrigues(gamma, p.theta), ref_cam.apply(T_co))


def object_to_inertial_batch(params: np.ndarray, ref_cam: RigidTransform, gamma):
    """Vectorized ``object_to_inertial`` for an (N, 4) array of [x, y, rho, theta].

    Returns (R_io (N,3,3), T_io (N,3)).
    """
    params = np.asarray(params, dtype=float)
    T_co = centroid_in_camera(params[:, 0], params[:, 1], params[:, 2])
    return rodrigues_batch(gamma, params[:, 3]), ref_cam.apply(T_co)


def relative_object_in_camera(g_io: RigidTransform, cam_t: RigidTransform) -> RigidTransform:
    """g_ic(t)^-1 g_io: object pose expressed in the current camera frame."""
    return cam_t.inverse() @ g_io


def reanchor(p: PoseParams, from_cam: RigidTransform, to_cam: RigidTransform) -> PoseParams:
    """Express the same inertial pose in the chart of another reference camera.

    Azimuth is inertial, so it carries over unchanged.
    """
    T_io = from_cam.apply(centroid_in_camera(p.x, p.y, p.rho))
    Tc = to_cam.inverse().apply(T_io)
    if Tc[2] <= 0.0:
        raise GeometryError("object is behind the new reference camera")
    return PoseParams(Tc[0] / Tc[2], Tc[1] / Tc[2], math.log(Tc[2]), p.theta)


def quat_to_matrix(q) -> np.ndarray:
    """Scalar-last unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    # canonical sign: qw >= 0
    return -q if q[3] < 0 else q


def look_at(position, target, up) -> RigidTransform:
    """Camera-to-world pose looking from ``position`` toward ``target``.

    ``up`` is the world up direction; image y points opposite to it.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise GeometryError("viewing direction is parallel to up")
    x /= nx
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), position)
