"""Held-out scoring: refine each view's pose against the frozen model, then PSNR/SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import geometry, renderer
from ..errors import EmptySplit
from ..optimize import TrainConfig, nearest_training_camera, refine_test_pose, rotation_error_deg


@dataclass
class Evaluation:
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    cameras: dict = field(default_factory=dict)
    rotation_error_deg: dict = field(default_factory=dict)
    aligned_rotation_error_deg: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.psnr.values())))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(list(self.ssim.values())))

    @property
    def mean_rotation_error_deg(self) -> float:
        vals = list(self.rotation_error_deg.values())
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_aligned_rotation_error_deg(self) -> float:
        vals = list(self.aligned_rotation_error_deg.values())
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        fin = lambda x: x if math.isfinite(x) else "inf"
        return {
            "psnr": {str(k): fin(v) for k, v in self.psnr.items()},
            "ssim": {str(k): v for k, v in self.ssim.items()},
            "mean_psnr": fin(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "rotation_error_deg": {str(k): v for k, v in self.rotation_error_deg.items()},
            "mean_rotation_error_deg": self.mean_rotation_error_deg,
            "aligned_rotation_error_deg": {str(k): v for k, v in self.aligned_rotation_error_deg.items()},
            "mean_aligned_rotation_error_deg": self.mean_aligned_rotation_error_deg,
        }


def gauge_rotation(cameras: dict, gt_cameras: dict) -> np.ndarray:
    """Rotation G minimizing sum ||G R_est - R_gt||_F over shared views.

    With every pose free the reconstruction can rotate as a whole; G removes
    that drift so test errors measure relative pose only.  Identity when no
    views are shared.
    """
    shared = [v for v in cameras if v in gt_cameras]
    if not shared:
        return np.eye(3)
    m = sum(gt_cameras[v].pose.R @ cameras[v].pose.R.T for v in shared)
    u, _, vt = np.linalg.svd(m)
    return u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt


def evaluate(gset, cameras: dict, bundle, split: str = "test", config: TrainConfig | None = None, *, refine: bool = True) -> Evaluation:
    """Score a model on a split.

    ``cameras`` holds the model's current cameras (refined training poses);
    views missing from it start from the bundle's imported pose.  With
    ``refine`` every scored view first gets test-time pose refinement.
    """
    config = config or TrainConfig()
    views = bundle.split_views(split)
    views = [v for v in views if v in bundle.images]
    if not views:
        raise EmptySplit(f"split {split!r} has no views with images")
    train_cams = {v: cameras[v] for v in bundle.train_views if v in cameras}
    gauge = gauge_rotation(train_cams, bundle.gt_cameras)
    out = Evaluation()
    for v in views:
        init = cameras.get(v, bundle.cameras[v])
        if split == "test" and config.test_pose_init == "nearest" and train_cams:
            init = nearest_training_camera(init, train_cams)
        cam = refine_test_pose(gset, bundle.images[v], init, config) if refine else init
        img = renderer.rasterize(gset, cam).color
        out.psnr[v] = renderer.psnr(img, bundle.images[v])
        out.ssim[v] = float(renderer.ssim(img, bundle.images[v]))
        out.cameras[v] = cam
        if v in bundle.gt_cameras:
            gt_r = bundle.gt_cameras[v].pose.R
            out.rotation_error_deg[v] = rotation_error_deg(cam, bundle.gt_cameras[v])
            out.aligned_rotation_error_deg[v] = math.degrees(geometry.rotation_angle(gauge @ cam.pose.R, gt_r))
    return out
