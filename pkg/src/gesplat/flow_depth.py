"""Explicit depth from optical flow constrained to epipolar lines.

Pipeline for a view ``i`` and each partner view ``j``: warp every pixel by
the flow, snap the warped point onto its epipolar line (perpendicular
foot), intersect the two viewing rays for a depth, and score that depth by
how strongly it reacts to a one-pixel slide along the epipolar line.  Per
pixel, the partner with the least sensitive estimate wins.

All batch functions are vectorized over pixels and return NaN (or the
sentinel ``INVALID``) where a pixel has no valid estimate; the scalar
wrappers raise the corresponding exceptions instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import (
    DegenerateGeometry,
    DegenerateLine,
    EpipoleAtInfinity,
    NegativeDepth,
    NoValidPixels,
    OutOfBounds,
    ParallelRays,
    ShapeMismatch,
)
from .renderer import bilinear_sample

INVALID = -1.0
PARALLEL_EPS = 1e-12
ANGLE_EPS = 1e-9
FD_STEP = 0.25

# status codes of flow_depth_batch
OK, PARALLEL, NEGATIVE = 0, 1, 2


@dataclass
class FlowField:
    view_i: int
    view_j: int
    data: np.ndarray  # (H, W, 2) pixel displacements (du, dv)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ShapeMismatch(f"flow must be HxWx2, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("flow contains non-finite values")


@dataclass
class DepthEstimate:
    depth: np.ndarray  # (H, W), INVALID where no estimate
    source_view: np.ndarray  # (H, W) winning partner view, -1 where invalid
    sensitivity: np.ndarray  # (H, W) winning sensitivity, INVALID where invalid

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) integer pixel centers in row-major order."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def flow_warp(p_i, flow: FlowField) -> np.ndarray:
    p = np.asarray(p_i, dtype=np.float64)
    H, W = flow.data.shape[:2]
    if np.any(p[..., 0] < 0) or np.any(p[..., 0] > W - 1) or np.any(p[..., 1] < 0) or np.any(p[..., 1] > H - 1):
        raise OutOfBounds("pixel lies outside the flow raster")
    return p + bilinear_sample(flow.data, p)


def perpendicular_foot_batch(p_hat, lines) -> np.ndarray:
    """Closed-form foot of the perpendicular from ``p_hat`` onto ``a x + b y + c = 0``."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    lines = np.asarray(lines, dtype=np.float64)
    a, b, c = lines[..., 0], lines[..., 1], lines[..., 2]
    x, y = p_hat[..., 0], p_hat[..., 1]
    n2 = a * a + b * b
    with np.errstate(invalid="ignore", divide="ignore"):
        fx = (b * b * x - a * b * y - a * c) / n2
        fy = (a * a * y - a * b * x - b * c) / n2
    out = np.stack([fx, fy], axis=-1)
    out[n2 <= geometry.LINE_EPS] = np.nan
    return out


def perpendicular_foot(p_hat, line) -> np.ndarray:
    coeffs = line.coeffs if isinstance(line, geometry.EpipolarLine) else np.asarray(line, dtype=np.float64)
    if coeffs[0] ** 2 + coeffs[1] ** 2 <= geometry.LINE_EPS:
        raise DegenerateLine("epipolar line has a = b = 0")
    return perpendicular_foot_batch(np.asarray(p_hat, dtype=np.float64)[None], coeffs[None])[0]


def _normalized_rays(p, K: geometry.CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, np.ones(p.shape[:-1])], axis=-1)


def flow_depth_batch(p_i, p_bar_j, cam_i: geometry.Camera, cam_j: geometry.Camera):
    """Camera-i depth of the intersection of the rays through ``p_i`` and ``p_bar_j``.

    Evaluated in the ratio-of-cross-products form
    ``|H x c_j| / |a x H|`` with ``a = K_i^-1 p_i~``, ``H`` the view-j ray
    rotated into camera i and ``c_j`` the center of camera j in camera-i
    coordinates.  Returns ``(depth, status)``; depth is NaN unless status is OK.
    """
    a = _normalized_rays(p_i, cam_i.intrinsics)
    b = _normalized_rays(p_bar_j, cam_j.intrinsics)
    Ri, ti, Rj, tj = cam_i.pose.R, cam_i.pose.t, cam_j.pose.R, cam_j.pose.t
    H = b @ (Ri.T @ Rj).T
    c_j = Ri.T @ (tj - ti)
    aH = np.cross(a, H)
    Hc = np.cross(H, np.broadcast_to(c_j, H.shape))
    den = np.linalg.norm(aH, axis=-1)
    num = np.linalg.norm(Hc, axis=-1)
    scale = np.linalg.norm(a, axis=-1) * np.linalg.norm(H, axis=-1)
    status = np.full(den.shape, OK, dtype=np.int64)
    parallel = ~(den > PARALLEL_EPS * scale)
    status[parallel] = PARALLEL
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = num / den
        # sign: D (a x H) = c_j x H must hold with D > 0
        sign = -(Hc * aH).sum(axis=-1)
        lam = np.einsum("...k,...k->...", depth[..., None] * a - c_j, H) / np.einsum("...k,...k->...", H, H)
    negative = ~parallel & ((sign <= 0) | (lam <= 0) | ~(depth > 0))
    status[negative] = NEGATIVE
    depth = np.where(status == OK, depth, np.nan)
    return depth, status


def flow_depth(p_i, p_bar_j, cam_i: geometry.Camera, cam_j: geometry.Camera) -> float:
    d, st = flow_depth_batch(np.asarray(p_i, dtype=np.float64)[None], np.asarray(p_bar_j, dtype=np.float64)[None], cam_i, cam_j)
    if st[0] == PARALLEL:
        raise ParallelRays("viewing rays are parallel")
    if st[0] == NEGATIVE:
        raise NegativeDepth("correspondence lies behind a camera")
    return float(d[0])


def _angle(u, v):
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    return np.arctan2(cross, np.einsum("...k,...k->...", u, v))


def sensitivity_analytic(p_i, p_bar_j, depth, cam_i: geometry.Camera, cam_j: geometry.Camera):
    """Closed-form derivative of the reference distance w.r.t. the epipolar slide.

    ``t sin(beta) sin^2(alpha + theta) / (m sin(theta) sin^2(alpha + beta))``
    with ``t`` the baseline, ``m`` the distance from the view-j center to the
    epipole on the pixel-unit image plane, ``alpha``/``beta`` the triangle
    angles at the two centers and ``theta`` the angle at the epipole.
    Raises EpipoleAtInfinity; degenerate pixels come back NaN.
    """
    epi = geometry.epipole_and_baseline(cam_i.pose, cam_j.pose, cam_j.intrinsics)
    O_i, O_j = cam_i.pose.t, cam_j.pose.t
    P = geometry.backproject(p_i, depth, cam_i.intrinsics, cam_i.pose)
    alpha = _angle(O_i - O_j, P - O_j)
    beta = _angle(O_j - O_i, P - O_i)
    q_e = epi.image_point
    q_p = geometry.image_plane_point(p_bar_j, cam_j.intrinsics)
    theta = _angle(-q_e, q_p - q_e)
    s_theta = np.sin(theta)
    s_ab = np.sin(alpha + beta)
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = epi.baseline * np.sin(beta) * np.sin(alpha + theta) ** 2 / (epi.m * s_theta * s_ab**2)
    bad = ~(s_theta > ANGLE_EPS) | ~(s_ab > ANGLE_EPS) | ~np.isfinite(sens)
    return np.where(bad, np.nan, sens)


def sensitivity_finite_difference(p_i, p_bar_j, cam_i: geometry.Camera, cam_j: geometry.Camera, lines, step: float = FD_STEP):
    """Central difference of the reference distance for a ``step``-pixel slide along the line."""
    lines = np.asarray(lines, dtype=np.float64)
    direction = np.stack([lines[..., 1], -lines[..., 0]], axis=-1)
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    O_i = cam_i.pose.t
    dist = []
    for sgn in (1.0, -1.0):
        q = p_bar_j + sgn * step * direction
        d, _ = flow_depth_batch(p_i, q, cam_i, cam_j)
        with np.errstate(invalid="ignore"):
            P = geometry.backproject(p_i, d, cam_i.intrinsics, cam_i.pose)
        dist.append(np.linalg.norm(P - O_i, axis=-1))
    return np.abs(dist[0] - dist[1]) / (2.0 * step)


def depth_sensitivity(p_i, p_bar_j, depth, cam_i: geometry.Camera, cam_j: geometry.Camera, lines=None):
    """Sensitivity per pixel, falling back to finite differences when the epipole is at infinity."""
    try:
        return sensitivity_analytic(p_i, p_bar_j, depth, cam_i, cam_j)
    except EpipoleAtInfinity:
        if lines is None:
            F = geometry.fundamental_matrix(cam_i.intrinsics, cam_i.pose, cam_j.intrinsics, cam_j.pose)
            lines = geometry.epipolar_lines(p_i, F)
        return sensitivity_finite_difference(p_i, p_bar_j, cam_i, cam_j, lines)


def depth_sensitivity_scalar(p_i, p_bar_j, depth, cam_i, cam_j) -> float:
    s = depth_sensitivity(np.asarray(p_i, float)[None], np.asarray(p_bar_j, float)[None], np.asarray([depth], float), cam_i, cam_j)
    if not np.isfinite(s[0]):
        raise DegenerateGeometry("sensitivity undefined for this configuration")
    return float(s[0])


def estimate_pair(cam_i: geometry.Camera, cam_j: geometry.Camera, flow: FlowField, pixels=None):
    """Depth and sensitivity of view i's pixels against one partner view.

    Returns ``(depth, sensitivity)`` flattened over ``pixels`` (default: all
    pixel centers of view i), NaN where invalid.
    """
    if pixels is None:
        H, W = flow.data.shape[:2]
        if (W, H) != (cam_i.width, cam_i.height):
            raise ShapeMismatch("flow raster does not match view i")
        pixels = pixel_grid(W, H)
        p_hat = pixels + flow.data.reshape(-1, 2)
    else:
        p_hat = flow_warp(pixels, flow)
    F = geometry.fundamental_matrix(cam_i.intrinsics, cam_i.pose, cam_j.intrinsics, cam_j.pose)
    lines = geometry.epipolar_lines(pixels, F)
    p_bar = perpendicular_foot_batch(p_hat, lines)
    depth, _ = flow_depth_batch(pixels, p_bar, cam_i, cam_j)
    sens = depth_sensitivity(pixels, p_bar, np.where(np.isfinite(depth), depth, 1.0), cam_i, cam_j, lines)
    sens = np.where(np.isfinite(depth), sens, np.nan)
    return depth, sens


def blend_depth(candidates, shape=None) -> DepthEstimate:
    """Per pixel, keep the candidate with the smallest sensitivity.

    ``candidates`` is an iterable of ``(view_id, depth, sensitivity)`` with
    NaN marking invalid entries.  Ties go to the smaller view id.
    """
    cands = sorted(candidates, key=lambda c: c[0])
    if not cands:
        raise ValueError("no candidate views")
    views = np.array([c[0] for c in cands])
    depth = np.stack([np.asarray(c[1], dtype=np.float64) for c in cands])
    sens = np.stack([np.asarray(c[2], dtype=np.float64) for c in cands])
    ok = np.isfinite(depth) & (depth > 0) & np.isfinite(sens)
    score = np.where(ok, sens, np.inf)
    k = np.argmin(score, axis=0)
    any_ok = ok.any(axis=0)
    pick = lambda arr: np.take_along_axis(arr, k[None], axis=0)[0]
    out_d = np.where(any_ok, pick(depth), INVALID)
    out_s = np.where(any_ok, pick(sens), INVALID)
    out_v = np.where(any_ok, views[k], -1)
    if shape is not None:
        out_d, out_s, out_v = out_d.reshape(shape), out_s.reshape(shape), out_v.reshape(shape)
    return DepthEstimate(depth=out_d, source_view=out_v.astype(np.int64), sensitivity=out_s)


def estimate_depth(view_i: int, cameras, flows) -> DepthEstimate:
    """Blended flow depth for every pixel of ``view_i``.

    ``flows`` maps partner view id -> FlowField from ``view_i`` to it.
    """
    cam_i = cameras[view_i]
    cands = []
    for j, flow in sorted(flows.items()):
        depth, sens = estimate_pair(cam_i, cameras[j], flow)
        cands.append((j, depth, sens))
    return blend_depth(cands, shape=(cam_i.height, cam_i.width))


def depth_loss(flow_depth_map, rendered_depth, alpha_acc=None, alpha_min: float = 0.5):
    """Mean absolute difference over valid flow-depth pixels.

    Pixels with the INVALID sentinel (or any non-positive target) and, when
    ``alpha_acc`` is given, pixels with accumulated opacity <= ``alpha_min``
    are ignored.  Works with numpy or torch rendered depth.
    """
    import torch

    target = np.asarray(flow_depth_map, dtype=np.float64)
    if tuple(target.shape) != tuple(rendered_depth.shape):
        raise ShapeMismatch(f"depth shapes differ: {target.shape} vs {tuple(rendered_depth.shape)}")
    mask = target > 0
    if alpha_acc is not None:
        acc = alpha_acc.detach().numpy() if torch.is_tensor(alpha_acc) else np.asarray(alpha_acc)
        mask &= acc > alpha_min
    if not mask.any():
        raise NoValidPixels("no pixel has both a flow depth and enough rendered opacity")
    if torch.is_tensor(rendered_depth):
        m = torch.from_numpy(mask)
        return (rendered_depth[m] - torch.from_numpy(target).to(rendered_depth.dtype)[m]).abs().mean()
    return float(np.abs(np.asarray(rendered_depth, dtype=np.float64)[mask] - target[mask]).mean())
