"""Scene bundle directory: load, save and scale normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import geometry
from ..errors import DataError
from ..matching import MatchSet
from . import io


@dataclass
class SceneBundle:
    cameras: dict  # view id -> Camera (initial, possibly noisy)
    images: dict  # view id -> (H, W, 3)
    points: np.ndarray
    colors: np.ndarray
    matches: MatchSet
    flows: dict = field(default_factory=dict)  # (i, j) -> (H, W, 2)
    train_views: list = field(default_factory=list)
    test_views: list = field(default_factory=list)
    gt_cameras: dict = field(default_factory=dict)
    gt_depths: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    scale: float = 1.0  # normalized = scale * original

    def __post_init__(self):
        if not self.train_views:
            self.train_views = sorted(set(self.cameras) - set(self.test_views))
        ids = set(self.cameras)
        if not set(self.train_views) <= ids or not set(self.test_views) <= ids:
            raise DataError("split references an unknown camera")
        for v in self.images:
            if v not in ids:
                raise DataError(f"image for unknown view {v}")
        for v in set(self.matches.view_i) | set(self.matches.view_j):
            if int(v) not in ids:
                raise DataError(f"match references unknown view {v}")

    def split_views(self, split: str) -> list:
        if split == "train":
            return list(self.train_views)
        if split == "test":
            return list(self.test_views)
        raise ValueError(f"unknown split {split!r}")


def save_bundle(bundle: SceneBundle, directory) -> None:
    d = Path(directory)
    io.write_cameras(d / "cameras.json", bundle.cameras)
    for v, img in sorted(bundle.images.items()):
        io.write_gimg(d / "images" / f"{v}.gimg", img)
        io.write_ppm(d / "images" / f"{v}.ppm", img)
    io.write_points(d / "points.gpts", bundle.points, bundle.colors)
    pairs = sorted({(int(a), int(b)) for a, b in zip(bundle.matches.view_i, bundle.matches.view_j)})
    for i, j in pairs:
        sel = (bundle.matches.view_i == i) & (bundle.matches.view_j == j)
        m = bundle.matches.select(sel)
        io.write_matches(d / "matches" / f"{i}_{j}.txt", m.p_i, m.p_j, m.weight)
    for (i, j), flow in sorted(bundle.flows.items()):
        io.write_flow(d / "flow" / f"{i}_{j}.gflw", flow)
    if bundle.gt_cameras:
        io.write_cameras(d / "gt" / "cameras.json", bundle.gt_cameras)
    for v, depth in sorted(bundle.gt_depths.items()):
        io.write_depth(d / "gt" / "depth" / f"{v}.gdpt", depth)
    cfg = dict(bundle.config)
    cfg["train_views"] = [int(v) for v in bundle.train_views]
    cfg["test_views"] = [int(v) for v in bundle.test_views]
    io.atomic_write_text(d / "config.json", json.dumps(cfg, indent=1, sort_keys=True))


def load_bundle(directory) -> SceneBundle:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"bundle directory {d} does not exist")
    cameras = io.read_cameras(d / "cameras.json")
    cfg_path = d / "config.json"
    config = {}
    if cfg_path.exists():
        try:
            config = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{cfg_path}: {exc}") from exc
    test_views = [int(v) for v in config.pop("test_views", [])]
    train_views = [int(v) for v in config.pop("train_views", [])]
    images = {}
    for v in cameras:
        for ext in (".gimg", ".ppm"):
            p = d / "images" / f"{v}{ext}"
            if p.exists():
                images[v] = io.read_image(p)
                break
        if v in images and images[v].shape[:2] != (cameras[v].height, cameras[v].width):
            raise DataError(f"image {v} does not match its camera size")
    points, colors = io.read_points(d / "points.gpts")
    matches = io.read_match_dir(d / "matches")
    flows = {}
    if (d / "flow").is_dir():
        for p in sorted((d / "flow").glob("*_*.gflw")):
            i, j = (int(x) for x in p.stem.split("_"))
            flows[(i, j)] = io.read_flow(p)
    gt_cameras, gt_depths = {}, {}
    if (d / "gt" / "cameras.json").exists():
        gt_cameras = io.read_cameras(d / "gt" / "cameras.json")
    if (d / "gt" / "depth").is_dir():
        for p in sorted((d / "gt" / "depth").glob("*.gdpt")):
            gt_depths[int(p.stem)] = io.read_depth(p)
    return SceneBundle(
        cameras=cameras, images=images, points=points, colors=colors, matches=matches, flows=flows,
        train_views=train_views, test_views=test_views, gt_cameras=gt_cameras, gt_depths=gt_depths, config=config,
    )


def scale_camera(cam: geometry.Camera, s: float) -> geometry.Camera:
    return cam.with_pose(geometry.CameraPose(cam.pose.R, s * cam.pose.t))


def import_init(bundle: SceneBundle) -> SceneBundle:
    """Scale the bundle about the origin so the point cloud's bounding-box diagonal is 1.

    Camera centers, ground-truth cameras and depths follow; the applied
    factor is kept in ``scale`` (compounded) for mapping results back.
    """
    if len(bundle.points) == 0:
        raise DataError("point cloud is empty")
    diag = float(np.linalg.norm(bundle.points.max(axis=0) - bundle.points.min(axis=0)))
    if not diag > 0:
        raise DataError("point cloud has zero extent")
    s = 1.0 / diag
    return replace(
        bundle,
        cameras={v: scale_camera(c, s) for v, c in bundle.cameras.items()},
        points=bundle.points * s,
        gt_cameras={v: scale_camera(c, s) for v, c in bundle.gt_cameras.items()},
        gt_depths={v: d * s for v, d in bundle.gt_depths.items()},
        scale=bundle.scale * s,
    )
