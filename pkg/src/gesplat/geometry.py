"""Pinhole cameras, rays, projections and two-view epipolar primitives.

Convention used everywhere: a pose stores ``R`` (world-from-camera rotation)
and ``t`` (camera center in world units), so the camera-frame coordinates of
a world point ``X`` are ``R.T @ (X - t)``.  Pixel centers sit at integer
coordinates, ``u`` indexes columns and ``v`` rows.

The low-level helpers (``world_to_camera``, ``camera_to_pixel``,
``quat_to_rotmat``) accept numpy arrays or torch tensors so the
differentiable code paths reuse exactly the same formulas.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    CoincidentCameras,
    DegenerateLine,
    EpipoleAtInfinity,
    GeometryError,
    PointBehindCamera,
)

DEPTH_EPS = 1e-9
LINE_EPS = 1e-18


def _stack(xs, axis=-1):
    if torch.is_tensor(xs[0]):
        return torch.stack(xs, dim=axis)
    return np.stack(xs, axis=axis)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"invalid image size {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("R must be a proper rotation matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q, t) -> "CameraPose":
        q = np.asarray(q, dtype=np.float64)
        return cls(quat_to_rotmat(q / np.linalg.norm(q)), t)

    @property
    def quaternion(self) -> np.ndarray:
        return rotmat_to_quat(self.R)

    @property
    def center(self) -> np.ndarray:
        return self.t


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    id: int = 0

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_pose(self, pose: CameraPose) -> "Camera":
        return Camera(self.intrinsics, pose, self.id)


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    d: np.ndarray

    def at(self, s):
        return self.o + np.asarray(s, dtype=np.float64)[..., None] * self.d


@dataclass(frozen=True)
class EpipolarLine:
    a: float
    b: float
    c: float

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


# -- rotations ---------------------------------------------------------------


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``; batched over leading dims."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        _stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
        _stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
        _stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
    ]
    return _stack(rows, axis=-2)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def axis_angle_to_rotmat(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-15:
        return np.eye(3)
    k = skew(rotvec / angle)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rotation_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle in radians between two rotations."""
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# -- projection --------------------------------------------------------------


def world_to_camera(X, R, t):
    """``R^T (X - t)`` for row-stacked points."""
    return (X - t) @ R


def camera_to_pixel(Xc, fx, fy, cx, cy):
    """Pinhole projection of camera-frame points, no validity checks."""
    z = Xc[..., 2]
    return _stack([fx * Xc[..., 0] / z + cx, fy * Xc[..., 1] / z + cy])


def project(X, K: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Pixel coordinates of world point(s) ``X``.

    Raises PointBehindCamera if any camera-frame depth is <= 1e-9.
    """
    Xc = world_to_camera(np.asarray(X, dtype=np.float64), pose.R, pose.t)
    if np.any(Xc[..., 2] <= DEPTH_EPS):
        raise PointBehindCamera("point at or behind the camera plane")
    return camera_to_pixel(Xc, K.fx, K.fy, K.cx, K.cy)


def pixel_to_ray(p, K: CameraIntrinsics, pose: CameraPose) -> Ray:
    p = np.asarray(p, dtype=np.float64)
    x = np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, np.ones(p.shape[:-1])], axis=-1)
    d = x @ pose.R.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return Ray(np.broadcast_to(pose.t, d.shape).copy(), d)


def backproject(p, depth, K: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """World point at camera-frame depth ``depth`` behind pixel ``p``."""
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, np.ones(p.shape[:-1])], axis=-1)
    return (depth[..., None] * x) @ pose.R.T + pose.t


# -- two-view geometry -------------------------------------------------------


def relative_pose(pose_i: CameraPose, pose_j: CameraPose):
    """``(R_rel, t_rel)`` with ``X_j = R_rel X_i + t_rel`` in camera frames."""
    R_rel = pose_j.R.T @ pose_i.R
    t_rel = pose_j.R.T @ (pose_i.t - pose_j.t)
    return R_rel, t_rel


def fundamental_matrix(K_i: CameraIntrinsics, pose_i: CameraPose, K_j: CameraIntrinsics, pose_j: CameraPose) -> np.ndarray:
    """F mapping homogeneous pixels of view i to epipolar lines in view j."""
    if np.linalg.norm(pose_i.t - pose_j.t) <= DEPTH_EPS:
        raise CoincidentCameras("camera centers coincide")
    R_rel, t_rel = relative_pose(pose_i, pose_j)
    return K_j.K_inv.T @ skew(t_rel) @ R_rel @ K_i.K_inv


def epipolar_lines(p, F: np.ndarray) -> np.ndarray:
    """Line coefficients ``F @ (u, v, 1)`` for an (N, 2) batch, unnormalized."""
    p = np.asarray(p, dtype=np.float64)
    ph = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return ph @ F.T


def epipolar_line(p_i, F: np.ndarray) -> EpipolarLine:
    a, b, c = epipolar_lines(np.asarray(p_i, dtype=np.float64)[None], F)[0]
    if a * a + b * b <= LINE_EPS:
        raise DegenerateLine("pixel is the epipole; epipolar line undefined")
    return EpipolarLine(float(a), float(b), float(c))


def point_line_distance(p, line) -> np.ndarray:
    line = np.asarray(line.coeffs if isinstance(line, EpipolarLine) else line, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    a, b, c = line[..., 0], line[..., 1], line[..., 2]
    return np.abs(a * p[..., 0] + b * p[..., 1] + c) / np.sqrt(a * a + b * b)


@dataclass(frozen=True)
class EpipolarGeometry:
    """Epipole of camera i in view j with the lengths the sensitivity model needs."""

    epipole: np.ndarray
    baseline: float
    m: float
    image_point: np.ndarray = field(repr=False)


def image_plane_point(p, K: CameraIntrinsics) -> np.ndarray:
    """Embed pixels into camera-frame 3D on the plane ``z = fx``.

    With square pixels, distances on this plane equal pixel distances, so
    lengths measured there share units with flow errors.
    """
    p = np.asarray(p, dtype=np.float64)
    return np.stack(
        [p[..., 0] - K.cx, (p[..., 1] - K.cy) * (K.fx / K.fy), np.full(p.shape[:-1], K.fx)], axis=-1
    )


def epipole_and_baseline(pose_i: CameraPose, pose_j: CameraPose, K_j: CameraIntrinsics) -> EpipolarGeometry:
    baseline = float(np.linalg.norm(pose_i.t - pose_j.t))
    if baseline <= DEPTH_EPS:
        raise CoincidentCameras("camera centers coincide")
    Oc = world_to_camera(pose_i.t, pose_j.R, pose_j.t)
    if Oc[2] <= DEPTH_EPS:
        raise EpipoleAtInfinity("camera i center is not in front of camera j")
    e = camera_to_pixel(Oc, K_j.fx, K_j.fy, K_j.cx, K_j.cy)
    q = image_plane_point(e, K_j)
    return EpipolarGeometry(epipole=e, baseline=baseline, m=float(np.linalg.norm(q)), image_point=q)
