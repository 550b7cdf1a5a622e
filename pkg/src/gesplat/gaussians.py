"""Hybrid Gaussian scene representation.

Ordinary Gaussians carry a free world position.  Ray-based Gaussians are
bound to a matching ray and only store a distance ``z`` along it; their
position is always ``o + z * d``.  Ray-based Gaussians come in pairs, one
per view of a cross-view match.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import EmptyInput, GeometryError

OPACITY_MAX = 1.0 - 1e-6
LOG_SCALE_MIN = float(np.log(1e-8))
LOG_SCALE_MAX = float(np.log(1e4))


def covariance(log_scale, quat):
    """3D covariance ``R S S^T R^T`` from log-scales and (unnormalized) quaternions.

    Works batched and on numpy arrays or torch tensors.
    """
    if hasattr(quat, "norm"):
        q = quat / quat.norm(dim=-1, keepdim=True)
        M = geometry.quat_to_rotmat(q) * log_scale.exp()[..., None, :]
        return M @ M.transpose(-1, -2)
    q = quat / np.linalg.norm(quat, axis=-1, keepdims=True)
    M = geometry.quat_to_rotmat(q) * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def ray_gaussian_position(z, origin, direction):
    """``o + z d`` for scalar or batched ``z``."""
    return origin + z[..., None] * direction if np.ndim(z) else origin + z * direction


@dataclass
class HybridGaussianSet:
    """Struct-of-arrays container; shared attributes list ordinary Gaussians first.

    ``ray_origin``/``ray_dir`` form the ray table (one row per ray-based
    Gaussian).  ``ray_view``/``ray_pixel`` record the anchoring view and
    pixel, ``pairs`` holds the two ray-based indices of each match.
    """

    mu: np.ndarray
    ray_origin: np.ndarray
    ray_dir: np.ndarray
    z: np.ndarray
    ray_view: np.ndarray
    ray_pixel: np.ndarray
    pairs: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    z_near: float = 1e-3
    z_far: float = 1e3

    def __post_init__(self):
        f8 = lambda a, shape: np.asarray(a, dtype=np.float64).reshape(shape)
        self.mu = f8(self.mu, (-1, 3))
        self.ray_origin = f8(self.ray_origin, (-1, 3))
        self.ray_dir = f8(self.ray_dir, (-1, 3))
        self.z = f8(self.z, (-1,))
        self.ray_view = np.asarray(self.ray_view, dtype=np.int64).reshape(-1)
        self.ray_pixel = f8(self.ray_pixel, (-1, 2))
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.log_scale = f8(self.log_scale, (-1, 3))
        self.quat = f8(self.quat, (-1, 4))
        self.color = f8(self.color, (-1, 3))
        self.opacity = f8(self.opacity, (-1,))
        n = self.n_total
        for name in ("log_scale", "quat", "color", "opacity"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        nr = self.n_ray
        for name in ("ray_dir", "z", "ray_view", "ray_pixel"):
            if len(getattr(self, name)) != nr:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {nr}")
        if len(self.pairs) and (self.pairs.min() < 0 or self.pairs.max() >= nr):
            raise ValueError("pair table references a missing ray-based Gaussian")

    @property
    def n_ordinary(self) -> int:
        return len(self.mu)

    @property
    def n_ray(self) -> int:
        return len(self.ray_origin)

    @property
    def n_total(self) -> int:
        return self.n_ordinary + self.n_ray

    def ray_positions(self) -> np.ndarray:
        return ray_gaussian_position(self.z, self.ray_origin, self.ray_dir)

    def positions(self) -> np.ndarray:
        return np.concatenate([self.mu, self.ray_positions()], axis=0)

    def covariances(self) -> np.ndarray:
        return covariance(self.log_scale, self.quat)

    def copy(self) -> "HybridGaussianSet":
        return replace(self, **{f.name: np.array(getattr(self, f.name)) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)})

    def enforce_invariants(self) -> "HybridGaussianSet":
        """Renormalize quaternions and clamp opacity, scale, color and z in place."""
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)
        np.clip(self.opacity, 0.0, OPACITY_MAX, out=self.opacity)
        np.clip(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scale)
        np.clip(self.color, 0.0, 1.0, out=self.color)
        self.z[:] = clamp_z(self.z, self.z_near, self.z_far)
        return self

    def rebind_rays(self, cameras) -> "HybridGaussianSet":
        """Recompute the ray table from the anchoring cameras' current poses."""
        for k in range(self.n_ray):
            cam = cameras[int(self.ray_view[k])]
            ray = geometry.pixel_to_ray(self.ray_pixel[k], cam.intrinsics, cam.pose)
            self.ray_origin[k] = ray.o
            self.ray_dir[k] = ray.d
        return self

    def to_ordinary(self) -> "HybridGaussianSet":
        """Convert every ray-based Gaussian into an ordinary one at its current position."""
        return HybridGaussianSet(
            mu=self.positions(),
            ray_origin=np.zeros((0, 3)),
            ray_dir=np.zeros((0, 3)),
            z=np.zeros(0),
            ray_view=np.zeros(0, dtype=np.int64),
            ray_pixel=np.zeros((0, 2)),
            pairs=np.zeros((0, 2), dtype=np.int64),
            log_scale=self.log_scale.copy(),
            quat=self.quat.copy(),
            color=self.color.copy(),
            opacity=self.opacity.copy(),
            z_near=self.z_near,
            z_far=self.z_far,
        )

    @classmethod
    def empty(cls) -> "HybridGaussianSet":
        return cls.from_ordinary(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_ordinary(cls, mu, log_scale, quat, color, opacity, z_near=1e-3, z_far=1e3) -> "HybridGaussianSet":
        return cls(
            mu=mu,
            ray_origin=np.zeros((0, 3)),
            ray_dir=np.zeros((0, 3)),
            z=np.zeros(0),
            ray_view=np.zeros(0, dtype=np.int64),
            ray_pixel=np.zeros((0, 2)),
            pairs=np.zeros((0, 2), dtype=np.int64),
            log_scale=log_scale,
            quat=quat,
            color=color,
            opacity=opacity,
            z_near=z_near,
            z_far=z_far,
        )


def clamp_z(z, z_near: float, z_far: float):
    # keep z strictly inside the open interval
    span = z_far - z_near
    return np.clip(z, z_near + 1e-9 * span, z_far - 1e-9 * span)


def depth_bounds(points: np.ndarray, cameras) -> tuple[float, float]:
    """1st/99th percentile of point-to-camera-center distances over all cameras."""
    dists = []
    for cam in cameras:
        Xc = geometry.world_to_camera(points, cam.pose.R, cam.pose.t)
        front = Xc[:, 2] > geometry.DEPTH_EPS
        dists.append(np.linalg.norm(points[front] - cam.pose.t, axis=1))
    d = np.concatenate(dists) if dists else np.zeros(0)
    if len(d) == 0:
        raise GeometryError("no imported point lies in front of any camera")
    lo, hi = np.percentile(d, [1.0, 99.0])
    if hi <= lo:
        hi = lo * 1.01 + 1e-6
    return float(lo), float(hi)


def knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance from every point to its ``k`` nearest other points."""
    n = len(points)
    if n < 2:
        return np.full(n, 0.01)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    return np.maximum(d[:, 1:].reshape(n, kk).mean(axis=1), 1e-7)


def _sample_color(image, p):
    if image is None:
        return None
    from .renderer import bilinear_sample

    return bilinear_sample(np.asarray(image, dtype=np.float64), np.asarray(p, dtype=np.float64)[None])[0]


def init_hybrid(
    points,
    colors,
    matches,
    cameras,
    images=None,
    *,
    seed: int = 42,
    alpha_init: float = 0.1,
    z_bounds: tuple[float, float] | None = None,
    absorb_radius: float = 1.0,
) -> HybridGaussianSet:
    """Build the initial hybrid set from an imported point cloud and matches.

    ``cameras`` maps view id -> Camera, ``images`` (optional) maps view id
    -> HxWx3 array used to color ray-based Gaussians.  For every match, the
    imported point projecting closest to ``p_i`` (within ``absorb_radius``
    pixels) is absorbed by the ray-based pair instead of becoming an
    ordinary Gaussian.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInput("initial point cloud is empty")
    rng = np.random.default_rng(seed)
    z_near, z_far = z_bounds if z_bounds is not None else depth_bounds(points, list(cameras.values()))

    n_match = len(matches)
    keep = np.ones(len(points), dtype=bool)
    for k in range(n_match):
        cam = cameras[int(matches.view_i[k])]
        Xc = geometry.world_to_camera(points, cam.pose.R, cam.pose.t)
        front = (Xc[:, 2] > geometry.DEPTH_EPS) & keep
        if not front.any():
            continue
        px = geometry.camera_to_pixel(Xc[front], cam.intrinsics.fx, cam.intrinsics.fy, cam.intrinsics.cx, cam.intrinsics.cy)
        err = np.linalg.norm(px - matches.p_i[k], axis=1)
        best = int(np.argmin(err))
        if err[best] < absorb_radius:
            keep[np.flatnonzero(front)[best]] = False

    nn_dist = knn_mean_distance(points)
    mu = points[keep]
    ord_log_scale = np.repeat(np.log(nn_dist[keep])[:, None], 3, axis=1)

    views = np.empty(2 * n_match, dtype=np.int64)
    pix = np.empty((2 * n_match, 2))
    views[0::2], views[1::2] = matches.view_i, matches.view_j
    pix[0::2], pix[1::2] = matches.p_i, matches.p_j
    origins = np.empty((2 * n_match, 3))
    dirs = np.empty((2 * n_match, 3))
    ray_colors = np.empty((2 * n_match, 3))
    for r in range(2 * n_match):
        cam = cameras[int(views[r])]
        ray = geometry.pixel_to_ray(pix[r], cam.intrinsics, cam.pose)
        origins[r], dirs[r] = ray.o, ray.d
        c = _sample_color(images.get(int(views[r])) if images else None, pix[r])
        if c is None:
            # nearest imported point to the ray's midpoint as a color proxy
            mid = ray.o + 0.5 * (z_near + z_far) * ray.d
            c = colors[int(np.argmin(np.linalg.norm(points - mid, axis=1)))]
        ray_colors[r] = c
    z = rng.uniform(z_near, z_far, size=2 * n_match)
    ray_log_scale = np.full((2 * n_match, 3), np.log(np.median(nn_dist)))

    n_total = len(mu) + 2 * n_match
    quat = np.zeros((n_total, 4))
    quat[:, 0] = 1.0
    return HybridGaussianSet(
        mu=mu,
        ray_origin=origins,
        ray_dir=dirs,
        z=clamp_z(z, z_near, z_far),
        ray_view=views,
        ray_pixel=pix,
        pairs=np.arange(2 * n_match).reshape(-1, 2),
        log_scale=np.clip(np.concatenate([ord_log_scale, ray_log_scale]), LOG_SCALE_MIN, LOG_SCALE_MAX),
        quat=quat,
        color=np.clip(np.concatenate([colors[keep], ray_colors]), 0.0, 1.0),
        opacity=np.full(n_total, alpha_init),
        z_near=z_near,
        z_far=z_far,
    )
