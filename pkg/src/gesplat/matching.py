"""Cross-view match priors and the two projection-consistency losses.

``gaussian_position_loss`` reprojects every ray-based Gaussian into the
other view of its match; ``rendering_geometry_loss`` lifts rendered depth at
the match pixels back to 3D and reprojects that point instead.  Both are
means of Euclidean pixel errors over directed terms.

The loss functions accept either numpy cameras (``geometry.Camera``) or
differentiable camera tensors (``CameraTensors``), so the optimizer and the
tests share one implementation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from . import geometry
from .errors import NonPositiveDepth, ParallelRays, SkippedAllTerms


@dataclass(frozen=True)
class MatchPair:
    view_i: int
    view_j: int
    p_i: tuple
    p_j: tuple
    weight: float = 1.0

    def __post_init__(self):
        if self.view_i == self.view_j:
            raise ValueError("a match must connect two different views")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("match weight must lie in [0, 1]")

    def reversed(self) -> "MatchPair":
        return MatchPair(self.view_j, self.view_i, self.p_j, self.p_i, self.weight)


@dataclass
class MatchSet:
    """Struct-of-arrays view of a list of matches."""

    view_i: np.ndarray
    view_j: np.ndarray
    p_i: np.ndarray
    p_j: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.view_i = np.asarray(self.view_i, dtype=np.int64).reshape(-1)
        self.view_j = np.asarray(self.view_j, dtype=np.int64).reshape(-1)
        self.p_i = np.asarray(self.p_i, dtype=np.float64).reshape(-1, 2)
        self.p_j = np.asarray(self.p_j, dtype=np.float64).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        n = len(self.view_i)
        if not (len(self.view_j) == len(self.p_i) == len(self.p_j) == len(self.weight) == n):
            raise ValueError("match arrays have inconsistent lengths")
        if np.any(self.view_i == self.view_j):
            raise ValueError("a match must connect two different views")

    def __len__(self) -> int:
        return len(self.view_i)

    def __getitem__(self, k) -> MatchPair:
        return MatchPair(int(self.view_i[k]), int(self.view_j[k]), tuple(self.p_i[k]), tuple(self.p_j[k]), float(self.weight[k]))

    @classmethod
    def from_pairs(cls, pairs) -> "MatchSet":
        pairs = list(pairs)
        return cls(
            [m.view_i for m in pairs],
            [m.view_j for m in pairs],
            np.array([m.p_i for m in pairs], dtype=np.float64).reshape(-1, 2),
            np.array([m.p_j for m in pairs], dtype=np.float64).reshape(-1, 2),
            [m.weight for m in pairs],
        )

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls([], [], np.zeros((0, 2)), np.zeros((0, 2)), [])

    def reversed(self) -> "MatchSet":
        return MatchSet(self.view_j, self.view_i, self.p_j, self.p_i, self.weight)

    def concat(self, other: "MatchSet") -> "MatchSet":
        return MatchSet(
            np.concatenate([self.view_i, other.view_i]),
            np.concatenate([self.view_j, other.view_j]),
            np.concatenate([self.p_i, other.p_i]),
            np.concatenate([self.p_j, other.p_j]),
            np.concatenate([self.weight, other.weight]),
        )

    def select(self, mask) -> "MatchSet":
        return MatchSet(self.view_i[mask], self.view_j[mask], self.p_i[mask], self.p_j[mask], self.weight[mask])

    def pixels_in_bounds(self, cameras) -> bool:
        for views, pix in ((self.view_i, self.p_i), (self.view_j, self.p_j)):
            for v, p in zip(views, pix):
                cam = cameras[int(v)]
                if not (0 <= p[0] <= cam.width - 1 and 0 <= p[1] <= cam.height - 1):
                    return False
        return True


class CameraTensors(NamedTuple):
    """Differentiable pose of one camera plus its (fixed) intrinsics."""

    R: torch.Tensor
    t: torch.Tensor
    intrinsics: geometry.CameraIntrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def _unpack(cam):
    if isinstance(cam, CameraTensors):
        return cam.R, cam.t, cam.intrinsics
    return torch.as_tensor(cam.pose.R), torch.as_tensor(cam.pose.t), cam.intrinsics


def image_diagonal(cam) -> float:
    return float(np.hypot(cam.width, cam.height))


def cross_projection(X, source_cam, target_cam) -> np.ndarray:
    """Pixel of world point ``X`` (seen from ``source_cam``) in ``target_cam``."""
    del source_cam  # the world point already encodes the source geometry
    return geometry.project(X, target_cam.intrinsics, target_cam.pose)


def _safe_norm(v):
    return torch.sqrt(torch.clamp((v * v).sum(dim=-1), min=1e-30))


def reprojection_errors(X, target_views, target_pixels, cameras, cap: float | None = None):
    """Per-term pixel error ``|p - project(X, cam)|`` (torch).

    Points at or behind a target camera contribute ``cap`` (default: the
    target image diagonal) with no gradient.
    """
    target_views = np.asarray(target_views)
    target_pixels = torch.as_tensor(target_pixels, dtype=X.dtype)
    err = torch.zeros(len(target_views), dtype=X.dtype)
    for v in np.unique(target_views):
        idx = np.flatnonzero(target_views == v)
        R, t, K = _unpack(cameras[int(v)])
        Xc = geometry.world_to_camera(X[idx], R, t)
        ok = Xc[:, 2] > geometry.DEPTH_EPS
        zsafe = torch.where(ok, Xc[:, 2], torch.ones_like(Xc[:, 2]))
        px = torch.stack([K.fx * Xc[:, 0] / zsafe + K.cx, K.fy * Xc[:, 1] / zsafe + K.cy], dim=-1)
        e = _safe_norm(px - target_pixels[idx])
        fill = cap if cap is not None else image_diagonal(cameras[int(v)])
        err = err.index_put((torch.as_tensor(idx),), torch.where(ok, e, torch.full_like(e, fill)))
    return err


def gaussian_position_terms(ray_means, gset, cameras, pairs=None):
    """All 2N directed position errors, ordered (a->b, b->a) per pair."""
    pairs = gset.pairs if pairs is None else np.asarray(pairs)
    if len(pairs) == 0:
        return torch.zeros(0, dtype=ray_means.dtype)
    src = pairs.reshape(-1)  # a0, b0, a1, b1, ...
    tgt = pairs[:, ::-1].reshape(-1)  # b0, a0, b1, a1, ...
    return reprojection_errors(ray_means[src], gset.ray_view[tgt], gset.ray_pixel[tgt], cameras)


def gaussian_position_loss(gset, matches=None, cameras=None, *, ray_means=None):
    """Mean directed reprojection error of ray-based Gaussian pairs.

    ``matches`` is accepted for interface symmetry; the pair table of the set
    already binds every match to its two Gaussians.  Returns a float when
    called with numpy data, a torch scalar when ``ray_means`` is given.
    """
    if matches is not None and len(matches) != len(gset.pairs):
        raise ValueError("every match needs its bound ray-based Gaussian pair")
    as_float = ray_means is None
    if ray_means is None:
        ray_means = torch.as_tensor(gset.ray_positions())
    terms = gaussian_position_terms(ray_means, gset, cameras)
    loss = terms.mean() if len(terms) else torch.zeros((), dtype=ray_means.dtype)
    return float(loss) if as_float else loss


def backproject_depth(p, depth, camera):
    """World point ``R (depth K^-1 p~) + t``; numpy or torch (CameraTensors)."""
    if isinstance(camera, CameraTensors):
        R, t, K = camera
        p = torch.as_tensor(p, dtype=R.dtype)
        x = torch.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, torch.ones_like(p[..., 0])], dim=-1)
        return (depth[..., None] * x) @ R.transpose(0, 1) + t
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("back-projection needs positive depth")
    return geometry.backproject(p, d, camera.intrinsics, camera.pose)


def rendering_geometry_terms(depth_map, src_pixels, tgt_views, tgt_pixels, src_cam, cameras):
    """Directed errors ``|p_j - project(P_i)|`` for terms sourced in one view.

    ``depth_map`` is the (H, W) rendered depth of the source view, sampled
    bilinearly at ``src_pixels``.  Returns ``(errors, valid_mask)``; terms
    with non-positive sampled depth are dropped from ``errors``.
    """
    from .renderer import bilinear_sample

    depth_map = torch.as_tensor(depth_map)
    d = bilinear_sample(depth_map, torch.as_tensor(src_pixels, dtype=depth_map.dtype))
    valid = (d > 0).detach().numpy()
    if not valid.any():
        return torch.zeros(0, dtype=depth_map.dtype), valid
    if not isinstance(src_cam, CameraTensors):
        src_cam = CameraTensors(*_unpack(src_cam))
    P = backproject_depth(torch.as_tensor(src_pixels)[valid], d[torch.as_tensor(valid)], src_cam)
    err = reprojection_errors(P, np.asarray(tgt_views)[valid], np.asarray(tgt_pixels)[valid], cameras)
    return err, valid


def rendering_geometry_loss(depth_maps, matches: MatchSet, cameras, *, return_skipped: bool = False):
    """Mean directed error of depth-lifted match points over both directions.

    ``depth_maps`` maps view id -> (H, W) depth.  Raises SkippedAllTerms if
    every term sampled a non-positive depth.
    """
    total = []
    skipped = 0
    for src_views, src_pix, tgt_views, tgt_pix in (
        (matches.view_i, matches.p_i, matches.view_j, matches.p_j),
        (matches.view_j, matches.p_j, matches.view_i, matches.p_i),
    ):
        for v in np.unique(src_views):
            idx = np.flatnonzero(src_views == v)
            err, valid = rendering_geometry_terms(
                depth_maps[int(v)], src_pix[idx], tgt_views[idx], tgt_pix[idx], cameras[int(v)], cameras
            )
            skipped += int((~valid).sum())
            total.append(err)
    errs = torch.cat(total) if total else torch.zeros(0)
    if len(errs) == 0:
        raise SkippedAllTerms("no match sampled a positive depth")
    loss = errs.mean()
    if not torch.is_tensor(next(iter(depth_maps.values()))) or not loss.requires_grad:
        loss = float(loss)
    return (loss, skipped) if return_skipped else loss


def midpoint_parameters(o1, d1, o2, d2):
    """Ray parameters ``(s, t)`` of the closest points of two lines (unit directions)."""
    w = o1 - o2
    b = (d1 * d2).sum(axis=-1)
    d = (d1 * w).sum(axis=-1)
    e = (d2 * w).sum(axis=-1)
    denom = 1.0 - b * b
    if np.any(denom <= 1e-15):
        raise ParallelRays("matched rays are parallel")
    return (b * e - d) / denom, (e - b * d) / denom


def triangulated_z(gset) -> np.ndarray:
    """Distances that put both members of every pair at their rays' closest points."""
    z = gset.z.copy()
    if len(gset.pairs):
        a, b = gset.pairs[:, 0], gset.pairs[:, 1]
        s, t = midpoint_parameters(gset.ray_origin[a], gset.ray_dir[a], gset.ray_origin[b], gset.ray_dir[b])
        z[a], z[b] = s, t
    return z
