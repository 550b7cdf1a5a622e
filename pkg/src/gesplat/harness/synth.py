"""Seeded synthetic scenes with exact ground truth.

Geometry is analytic (a back plane plus spheres), so depths, flows and
matches are ray-cast exactly.  The ground-truth Gaussians are flat disks on
those surfaces; match anchors sit on integer pixels of their first view and
are represented by a pair of ray-based Gaussians, which makes the rendered
ground truth a hybrid set itself.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import geometry, renderer
from ..errors import ConfigError, DataError
from ..gaussians import HybridGaussianSet
from ..matching import MatchSet
from .bundle import SceneBundle

FOCAL = 150.0 / 128.0  # focal length as a fraction of the image width
# The back plane must not face any camera squarely: coplanar splats all share
# one depth there, and their blending order (so the image) flips with tiny
# pose changes.  Tilting it past the arc's yaw range fixes the order.
PLANE_YAW_DEG, PLANE_PITCH_DEG = 25.0, 8.0
PLANE_SIGMA = 0.45  # splat sigma as a fraction of the grid spacing


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_gaussians: int = 200
    n_matches: int = 30
    n_train: int = 6
    n_test: int = 3
    placement: str = "arc"
    width: int = 128
    height: int = 96
    pose_sigma_deg: float = 0.0
    pose_sigma_frac: float = 0.0
    flow_sigma: float = 0.0
    match_sigma: float = 0.0
    point_sigma: float = 0.0

    def __post_init__(self):
        if self.n_train + self.n_test < 2 or self.n_train < 2:
            raise ConfigError("need at least two training cameras")
        if self.n_gaussians < 1 or self.n_gaussians <= self.n_matches or self.n_matches < 0 or self.n_test < 0:
            raise ConfigError("need at least one Gaussian and fewer matches than Gaussians")
        if self.placement not in ("arc", "ring"):
            raise ConfigError("placement must be 'arc' or 'ring'")
        if self.width < 4 or self.height < 4:
            raise ConfigError("image too small")
        if min(self.pose_sigma_deg, self.pose_sigma_frac, self.flow_sigma, self.match_sigma, self.point_sigma) < 0:
            raise ConfigError("noise levels must be non-negative")

    @classmethod
    def from_json(cls, path) -> "SyntheticSceneSpec":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scene spec {path}: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def reference_spec(**overrides) -> SyntheticSceneSpec:
    """The desk-scale reference scene with perturbed poses and slightly noisy points."""
    base = dict(seed=0, pose_sigma_deg=2.0, pose_sigma_frac=0.02, point_sigma=0.002)
    base.update(overrides)
    return SyntheticSceneSpec(**base)


@dataclass(eq=False)
class Plane:
    point: np.ndarray
    normal: np.ndarray  # unit, facing the cameras

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        return np.where((denom < 0) & (t > 0), t, np.inf)

    def normal_at(self, X):
        return np.broadcast_to(self.normal, X.shape).copy()

    def scaled(self, s):
        return Plane(self.point * s, self.normal)


@dataclass(eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o, d):
        oc = o - self.center
        b = (d * oc).sum(axis=-1)
        c = (oc * oc).sum(axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-12, t0, np.where(t1 > 1e-12, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def normal_at(self, X):
        n = X - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def scaled(self, s):
        return Sphere(self.center * s, self.radius * s)


def raycast(surfaces, o, d):
    """Nearest hit ``(t, surface index)`` per ray; ``inf``/-1 on a miss."""
    ts = np.stack([s.intersect(o, d) for s in surfaces])
    k = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, k[None], axis=0)[0]
    return t, np.where(np.isfinite(t), k, -1)


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation with +z towards ``target`` and +y roughly along ``up``."""
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _scene_layout(spec: SyntheticSceneSpec):
    if spec.placement == "arc":
        surfaces = [
            Plane(np.array([0.0, 0.0, 1.2]), _plane_tilt() @ np.array([0.0, 0.0, -1.0])),
            Sphere(np.array([-0.35, 0.1, 0.2]), 0.3),
            Sphere(np.array([0.4, -0.15, 0.45]), 0.25),
        ]
        target = np.array([0.0, 0.0, 0.4])
        n = spec.n_train + spec.n_test
        phis = np.radians(np.linspace(-18.0, 18.0, n))
        centers = [target + 2.6 * np.array([np.sin(p), 0.08 * np.sin(3 * p), -np.cos(p)]) for p in phis]
    else:
        surfaces = [
            Sphere(np.array([0.0, 0.0, 0.0]), 0.45),
            Sphere(np.array([0.55, 0.1, 0.2]), 0.25),
            Sphere(np.array([-0.45, -0.15, -0.35]), 0.3),
        ]
        target = np.zeros(3)
        n = spec.n_train + spec.n_test
        phis = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        centers = [2.6 * np.array([np.sin(p), 0.3, -np.cos(p)]) for p in phis]
    return surfaces, target, centers


def _split(n_total: int, n_test: int):
    if n_test == 0:
        return list(range(n_total)), []
    test = sorted({int(round(x)) for x in np.linspace(1, n_total - 2, n_test)}) if n_total > 2 else [n_total - 1]
    if len(test) != n_test:
        test = list(range(n_total - n_test, n_total))
    return [v for v in range(n_total) if v not in test], test


def _plane_tilt():
    yaw, pitch = np.radians(PLANE_YAW_DEG), np.radians(PLANE_PITCH_DEG)
    return geometry.axis_angle_to_rotmat(np.array([0.0, yaw, 0.0])) @ geometry.axis_angle_to_rotmat(np.array([pitch, 0.0, 0.0]))


def _plane_axes(normal):
    """In-plane unit axes closest to world x and y."""
    e1 = np.array([1.0, 0.0, 0.0]) - normal[0] * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2 * np.sign(e2[1])


def _frame(normal):
    """Rotation whose third column is ``normal``."""
    a = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(normal, a)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return np.stack([t1, t2, normal], axis=1)


def _plane_patch(plane, cams, margin=0.08):
    """Bounds (u0, u1, v0, v1) along the plane axes covering every camera frustum."""
    e1, e2 = _plane_axes(plane.normal)
    uv = []
    for cam in cams:
        K = cam.intrinsics
        corners = np.array([[-0.5, -0.5], [K.width - 0.5, -0.5], [-0.5, K.height - 0.5], [K.width - 0.5, K.height - 0.5]])
        o, d = _pixel_rays(cam, corners)
        t = plane.intersect(o, d)
        X = o + t[:, None] * d
        uv.append(np.stack([(X - plane.point) @ e1, (X - plane.point) @ e2], axis=1))
    uv = np.concatenate(uv)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    pad = margin * (hi - lo)
    return lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1]


def _sample_surfaces(rng, surfaces, n, placement, patch=None):
    """Stratified points on the camera-facing surface parts: positions, normals, sigmas, surface ids."""
    spheres = [s for s in surfaces if isinstance(s, Sphere)]
    planes = [s for s in surfaces if isinstance(s, Plane)]
    n_sph = n if not planes else int(round(0.3 * n))
    n_plane = n - n_sph
    pts, normals, sig, which = [], [], [], []
    if planes:
        u0, u1, v0, v1 = patch
        w, h = u1 - u0, v1 - v0
        ny = max(1, int(round(np.sqrt(n_plane * h / w))))
        nx = int(np.ceil(n_plane / ny))
        xs, ys = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(ny) + 0.5) / ny)
        cells = np.stack([xs.ravel(), ys.ravel()], axis=1)[:n_plane]
        cells = cells + rng.uniform(-0.25, 0.25, cells.shape) / np.array([nx, ny])
        P = planes[0]
        e1, e2 = _plane_axes(P.normal)
        for c in cells:
            pts.append(P.point + (u0 + w * c[0]) * e1 + (v0 + h * c[1]) * e2)
            normals.append(P.normal)
        spacing = np.sqrt(w * h / max(n_plane, 1))
        sig += [PLANE_SIGMA * spacing] * n_plane
        which += [surfaces.index(P)] * n_plane
    areas = np.array([s.radius**2 for s in spheres])
    counts = np.floor(n_sph * areas / areas.sum()).astype(int)
    counts[: n_sph - counts.sum()] += 1
    for s, m in zip(spheres, counts):
        golden = np.pi * (3.0 - np.sqrt(5.0))
        k = np.arange(m) + 0.5
        if placement == "arc":
            # cap facing -z, 0..75 degrees from the pole
            cz = 1.0 - k / m * (1.0 - np.cos(np.radians(75.0)))
            dirs = np.stack([np.sqrt(1 - cz**2) * np.cos(golden * k), np.sqrt(1 - cz**2) * np.sin(golden * k), -cz], axis=1)
            area = 2 * np.pi * s.radius**2 * (1.0 - np.cos(np.radians(75.0)))
        else:
            cz = 1.0 - 2.0 * k / m
            dirs = np.stack([np.sqrt(1 - cz**2) * np.cos(golden * k), cz, np.sqrt(1 - cz**2) * np.sin(golden * k)], axis=1)
            area = 4 * np.pi * s.radius**2
        ang = rng.uniform(0, 2 * np.pi)
        rot = geometry.axis_angle_to_rotmat(np.array([0.0, 0.0, ang]) if placement == "arc" else np.array([0.0, ang, 0.0]))
        dirs = dirs @ rot.T
        pts.extend(s.center + s.radius * dirs)
        normals.extend(dirs)
        sig += [0.6 * np.sqrt(area / max(m, 1))] * m
        which += [surfaces.index(s)] * m
    return np.array(pts).reshape(-1, 3), np.array(normals).reshape(-1, 3), np.array(sig), np.array(which, dtype=np.int64)


def _gaussian_attributes(rng, normals, sigmas):
    quat = np.array([geometry.rotmat_to_quat(_frame(n)) for n in normals]).reshape(-1, 4)
    log_scale = np.log(np.stack([sigmas, sigmas, 0.1 * sigmas], axis=1)).reshape(-1, 3)
    color = rng.uniform(0.1, 0.9, size=(len(normals), 3))
    opacity = rng.uniform(0.85, 0.95, size=len(normals))
    return log_scale, quat, color, opacity


def _pixel_rays(cam: geometry.Camera, pixels):
    ray = geometry.pixel_to_ray(pixels, cam.intrinsics, cam.pose)
    return ray.o, ray.d


def depth_map(surfaces, cam: geometry.Camera) -> np.ndarray:
    """Camera-frame z of the first surface hit per pixel; 0 on a miss."""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    o, d = _pixel_rays(cam, pix)
    t, _ = raycast(surfaces, o, d)
    z = t * (d @ cam.pose.R[:, 2])
    return np.where(np.isfinite(t), z, 0.0).reshape(cam.height, cam.width)


def exact_flow(surfaces, cam_i: geometry.Camera, cam_j: geometry.Camera) -> np.ndarray:
    """Flow from view i to view j induced by the surfaces; zero where undefined."""
    v, u = np.mgrid[0 : cam_i.height, 0 : cam_i.width]
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    o, d = _pixel_rays(cam_i, pix)
    t, _ = raycast(surfaces, o, d)
    hit = np.isfinite(t)
    flow = np.zeros_like(pix)
    X = o[hit] + t[hit, None] * d[hit]
    Xc = geometry.world_to_camera(X, cam_j.pose.R, cam_j.pose.t)
    front = Xc[:, 2] > geometry.DEPTH_EPS
    K = cam_j.intrinsics
    pj = geometry.camera_to_pixel(Xc[front], K.fx, K.fy, K.cx, K.cy)
    idx = np.flatnonzero(hit)[front]
    flow[idx] = pj - pix[idx]
    return flow.reshape(cam_i.height, cam_i.width, 2)


def _visible(surfaces, cam, X, p, margin=2.0):
    if not (margin <= p[0] <= cam.width - 1 - margin and margin <= p[1] <= cam.height - 1 - margin):
        return False
    o, d = _pixel_rays(cam, p[None])
    t, _ = raycast(surfaces, o, d)
    return bool(np.isfinite(t[0]) and abs(t[0] - np.linalg.norm(X - cam.pose.t)) <= 1e-9 * t[0])


def _sample_anchors(rng, surfaces, cams, train_views, n):
    """Integer pixels of one training view whose surface point is seen in another."""
    out = []
    guard = 0
    while len(out) < n:
        guard += 1
        if guard > 200 * max(n, 1):
            raise ConfigError("could not place enough matches")
        i = int(rng.choice(train_views))
        j = int(rng.choice([v for v in train_views if v != i]))
        cam_i, cam_j = cams[i], cams[j]
        p = np.array([rng.integers(2, cam_i.width - 2), rng.integers(2, cam_i.height - 2)], dtype=np.float64)
        o, d = _pixel_rays(cam_i, p[None])
        t, k = raycast(surfaces, o, d)
        if not np.isfinite(t[0]):
            continue
        X = o[0] + t[0] * d[0]
        Xc = geometry.world_to_camera(X, cam_j.pose.R, cam_j.pose.t)
        if Xc[2] <= geometry.DEPTH_EPS:
            continue
        pj = geometry.camera_to_pixel(Xc, cam_j.intrinsics.fx, cam_j.intrinsics.fy, cam_j.intrinsics.cx, cam_j.intrinsics.cy)
        if not _visible(surfaces, cam_j, X, pj):
            continue
        out.append((i, j, p, int(k[0])))
    return out


def _perturb(rng, cam: geometry.Camera, sigma_deg: float, sigma_t: float) -> geometry.Camera:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    R = cam.pose.R @ geometry.axis_angle_to_rotmat(np.radians(sigma_deg) * axis)
    return cam.with_pose(geometry.CameraPose(R, cam.pose.t + sigma_t * direction))


@dataclass
class SyntheticScene:
    bundle: SceneBundle
    gt_set: HybridGaussianSet
    spec: SyntheticSceneSpec


def synth_scene(spec: SyntheticSceneSpec | None = None) -> SyntheticScene:
    """Sample, render and package a synthetic scene; deterministic per seed."""
    spec = spec or reference_spec()
    rng = np.random.default_rng(spec.seed)
    surfaces, target, centers = _scene_layout(spec)
    n_cam = spec.n_train + spec.n_test
    train_views, test_views = _split(n_cam, spec.n_test)

    n_surface = spec.n_gaussians - spec.n_matches
    raw_cams = {
        v: geometry.Camera(
            geometry.CameraIntrinsics(FOCAL * spec.width, FOCAL * spec.width, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height),
            geometry.CameraPose(look_at(c, target), c),
            v,
        )
        for v, c in enumerate(centers)
    }
    planes = [srf for srf in surfaces if isinstance(srf, Plane)]
    patch = _plane_patch(planes[0], raw_cams.values()) if planes else None
    pts, normals, sig, which = _sample_surfaces(rng, surfaces, n_surface, spec.placement, patch)
    anchors = _sample_anchors(rng, surfaces, raw_cams, train_views, spec.n_matches)

    # normalize: bounding-box diagonal of all Gaussian centers becomes 1
    anchor_X = []
    for i, _, p, _ in anchors:
        o, d = _pixel_rays(raw_cams[i], p[None])
        t, _ = raycast(surfaces, o, d)
        anchor_X.append(o[0] + t[0] * d[0])
    all_pts = np.concatenate([pts, np.array(anchor_X).reshape(-1, 3)])
    s = 1.0 / float(np.linalg.norm(all_pts.max(axis=0) - all_pts.min(axis=0)))
    surfaces = [srf.scaled(s) for srf in surfaces]
    pts = pts * s
    sig = sig * s
    cams = {v: c.with_pose(geometry.CameraPose(c.pose.R, c.pose.t * s)) for v, c in raw_cams.items()}

    log_scale, quat, color, opacity = _gaussian_attributes(rng, normals, sig)

    # anchor pairs, re-cast in normalized units
    surf_sig = {k: float(np.median(sig[which == k])) if np.any(which == k) else float(np.median(sig)) for k in range(len(surfaces))}
    ray_o, ray_d, ray_z, ray_view, ray_pix = [], [], [], [], []
    a_normals, a_sig, p_i_list, p_j_list, v_i, v_j = [], [], [], [], [], []
    for i, j, p, k in anchors:
        o, d = _pixel_rays(cams[i], p[None])
        t, _ = raycast(surfaces, o, d)
        X = o[0] + t[0] * d[0]
        pj = geometry.project(X, cams[j].intrinsics, cams[j].pose)
        oj, dj = _pixel_rays(cams[j], pj[None])
        zj = float((X - oj[0]) @ dj[0])
        ray_o += [o[0], oj[0]]
        ray_d += [d[0], dj[0]]
        ray_z += [float(t[0]), zj]
        ray_view += [i, j]
        ray_pix += [p, pj]
        a_normals.append(surfaces[k].normal_at(X[None])[0])
        a_sig.append(surf_sig[k])
        p_i_list.append(p)
        p_j_list.append(pj)
        v_i.append(i)
        v_j.append(j)
    a_ls, a_q, a_c, a_op = _gaussian_attributes(rng, np.array(a_normals).reshape(-1, 3), np.array(a_sig))
    pair_idx = np.repeat(np.arange(len(anchors)), 2)
    gt = HybridGaussianSet(
        mu=pts,
        ray_origin=np.array(ray_o).reshape(-1, 3),
        ray_dir=np.array(ray_d).reshape(-1, 3),
        z=np.array(ray_z),
        ray_view=np.array(ray_view, dtype=np.int64),
        ray_pixel=np.array(ray_pix).reshape(-1, 2),
        pairs=np.arange(2 * len(anchors)).reshape(-1, 2),
        log_scale=np.concatenate([log_scale, a_ls[pair_idx]]),
        quat=np.concatenate([quat, a_q[pair_idx]]),
        color=np.concatenate([color, a_c[pair_idx]]),
        opacity=np.concatenate([opacity, a_op[pair_idx]]),
        z_near=1e-3,
        z_far=100.0,
    )

    images = {v: np.clip(renderer.rasterize(gt, cams[v]).color, 0.0, 1.0) for v in cams}
    depths = {v: depth_map(surfaces, cams[v]) for v in cams}
    flows = {}
    for i in train_views:
        for j in train_views:
            if i != j:
                f = exact_flow(surfaces, cams[i], cams[j])
                if spec.flow_sigma > 0:
                    f = f + rng.normal(0.0, spec.flow_sigma, f.shape)
                flows[(i, j)] = f

    p_j_arr = np.array(p_j_list).reshape(-1, 2)
    if spec.match_sigma > 0:
        p_j_arr = p_j_arr + rng.normal(0.0, spec.match_sigma, p_j_arr.shape)
    matches = MatchSet(v_i, v_j, np.array(p_i_list).reshape(-1, 2), p_j_arr, np.ones(len(anchors)))

    centers_gt = gt.positions()
    anchor_centers = centers_gt[gt.n_ordinary :: 2] if gt.n_ray else np.zeros((0, 3))
    points = np.concatenate([pts, anchor_centers])
    point_colors = np.concatenate([color, a_c]).reshape(-1, 3)
    if spec.point_sigma > 0:
        points = points + rng.normal(0.0, spec.point_sigma, points.shape)

    noisy = {}
    for v, c in cams.items():
        noisy[v] = _perturb(rng, c, spec.pose_sigma_deg, spec.pose_sigma_frac) if (spec.pose_sigma_deg > 0 or spec.pose_sigma_frac > 0) else c

    from ..optimize import TrainConfig

    config = TrainConfig(seed=spec.seed).to_dict()
    bundle = SceneBundle(
        cameras=noisy, images=images, points=points, colors=point_colors, matches=matches, flows=flows,
        train_views=train_views, test_views=test_views, gt_cameras=cams, gt_depths=depths, config=config,
    )
    return SyntheticScene(bundle=bundle, gt_set=gt, spec=spec)


def write_spec(spec: SyntheticSceneSpec, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(asdict(spec), indent=1, sort_keys=True))
