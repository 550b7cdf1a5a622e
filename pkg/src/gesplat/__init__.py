"""Pose-free sparse-view Gaussian splatting with geometric priors."""
from . import errors, geometry
from .gaussians import HybridGaussianSet, init_hybrid
from .optimize import TrainConfig, refine_test_pose, train

__version__ = "0.1.0"

__all__ = ["errors", "geometry", "HybridGaussianSet", "init_hybrid", "TrainConfig", "train", "refine_test_pose", "__version__"]
