"""Estimator-style wrappers around training and flow-depth estimation.

``SplatReconstructor`` follows the fit/predict/score protocol on scene
bundles; ``FlowDepthEstimator`` is a fitted transformer turning flow
rasters into depth maps.  Both expose ``get_params``/``set_params``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import geometry, renderer
from .errors import DataError, EmptySplit, ShapeMismatch
from .flow_depth import FlowField, estimate_depth
from .optimize import TrainConfig, refine_test_pose, train

_BUNDLE_FIELDS = ("cameras", "images", "points", "colors", "matches", "flows", "train_views")


def check_bundle(bundle):
    """Validate the attributes training needs; returns the bundle unchanged."""
    missing = [f for f in _BUNDLE_FIELDS if not hasattr(bundle, f)]
    if missing:
        raise DataError(f"bundle lacks {missing}")
    if len(bundle.train_views) < 2:
        raise DataError("need at least two training views")
    for v in bundle.train_views:
        if v not in bundle.cameras or v not in bundle.images:
            raise DataError(f"training view {v} lacks a camera or an image")
        check_image(bundle.images[v], bundle.cameras[v])
    pts = np.asarray(bundle.points)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise DataError("points must be a non-empty (N, 3) array")
    if not np.all(np.isfinite(pts)):
        raise DataError("points contain non-finite values")
    return bundle


def check_image(image, camera: geometry.Camera | None = None) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected an HxWx3 image, got {img.shape}")
    if camera is not None and img.shape[:2] != (camera.height, camera.width):
        raise ShapeMismatch("image size does not match its camera")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    return img


def check_cameras(cameras) -> dict:
    if isinstance(cameras, geometry.Camera):
        return {cameras.id: cameras}
    cams = dict(cameras) if isinstance(cameras, dict) else {c.id: c for c in cameras}
    for c in cams.values():
        if not isinstance(c, geometry.Camera):
            raise TypeError("cameras must be gesplat.geometry.Camera instances")
    return cams


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class SplatReconstructor(BaseEstimator):
    """Jointly fits Gaussians and poses to a scene bundle.

    Hyper-parameters mirror the main ``TrainConfig`` fields; ``config``
    passes any remaining fields as a dict.
    """

    def __init__(
        self,
        total_iters=5000,
        phase1_iters=2000,
        lambda_gp=1.0,
        lambda_rg=0.3,
        lambda_depth=0.1,
        refiner_iters=200,
        use_hybrid=True,
        use_graph=True,
        refine_test_poses=True,
        seed=42,
        config=None,
    ):
        self.total_iters = total_iters
        self.phase1_iters = phase1_iters
        self.lambda_gp = lambda_gp
        self.lambda_rg = lambda_rg
        self.lambda_depth = lambda_depth
        self.refiner_iters = refiner_iters
        self.use_hybrid = use_hybrid
        self.use_graph = use_graph
        self.refine_test_poses = refine_test_poses
        self.seed = seed
        self.config = config

    def _train_config(self) -> TrainConfig:
        base = TrainConfig.from_dict(dict(self.config or {}))
        own = {k: v for k, v in self.get_params().items() if k not in ("config", "refine_test_poses")}
        return dataclasses.replace(base, **own)

    def fit(self, bundle, y=None):
        check_bundle(bundle)
        self.config_ = self._train_config()
        res = train(bundle, self.config_)
        self.gaussians_ = res.gset
        self.cameras_ = res.cameras
        self.log_ = res.log
        self.refiner_params_ = res.refiner_params
        return self

    def predict(self, cameras):
        """Rendered HxWx3 image per camera id."""
        _check_fitted(self, "gaussians_")
        return {v: renderer.rasterize(self.gaussians_, c).color for v, c in check_cameras(cameras).items()}

    def refine_pose(self, image, init_camera: geometry.Camera) -> geometry.Camera:
        _check_fitted(self, "gaussians_")
        return refine_test_pose(self.gaussians_, check_image(image, init_camera), init_camera, self.config_)

    def score(self, bundle, y=None, split="test") -> float:
        """Mean PSNR over a split, test poses refined first."""
        from .harness.evaluate import evaluate

        _check_fitted(self, "gaussians_")
        views = bundle.split_views(split) if hasattr(bundle, "split_views") else []
        if not views:
            raise EmptySplit(f"split {split!r} is empty")
        ev = evaluate(self.gaussians_, self.cameras_, bundle, split, self.config_, refine=self.refine_test_poses)
        return ev.mean_psnr


class FlowDepthEstimator(TransformerMixin, BaseEstimator):
    """Per-pixel depth of one view from flow rasters to partner views."""

    def __init__(self, view=0):
        self.view = view

    def fit(self, cameras, y=None):
        cams = check_cameras(cameras)
        if self.view not in cams:
            raise DataError(f"no camera for view {self.view}")
        if len(cams) < 2:
            raise DataError("need at least one partner camera")
        self.cameras_ = cams
        return self

    def transform(self, flows) -> np.ndarray:
        """``flows`` maps partner id -> (H, W, 2) raster; returns the blended depth (-1 where invalid)."""
        _check_fitted(self, "cameras_")
        cam = self.cameras_[self.view]
        fields = {}
        for j, data in sorted(dict(flows).items()):
            if j not in self.cameras_:
                raise DataError(f"no camera for partner view {j}")
            f = FlowField(self.view, j, data)
            if f.data.shape[:2] != (cam.height, cam.width):
                raise ShapeMismatch("flow raster does not match the view size")
            fields[j] = f
        if not fields:
            raise DataError("no flow rasters given")
        self.estimate_ = estimate_depth(self.view, self.cameras_, fields)
        return self.estimate_.depth
