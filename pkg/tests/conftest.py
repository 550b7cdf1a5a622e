import numpy as np
import pytest
import torch

from gesplat import geometry
from gesplat.gaussians import HybridGaussianSet

torch.set_num_threads(1)


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    return np.stack([x, np.cross(z, x), z], axis=1)


def make_camera(center, target, f=100.0, width=64, height=48, cam_id=0, fy=None):
    K = geometry.CameraIntrinsics(f, f if fy is None else fy, (width - 1) / 2, (height - 1) / 2, width, height)
    center = np.asarray(center, dtype=np.float64)
    return geometry.Camera(K, geometry.CameraPose(look_at(center, target), center), cam_id)


def random_two_view(rng, min_angle=10.0, max_angle=60.0, f_range=(80.0, 200.0), width=200, height=150):
    """Two cameras viewing a common point ``X`` with a triangulation angle in the given range (degrees)."""
    X = rng.uniform(-0.5, 0.5, 3)
    d1 = rng.normal(size=3)
    d1 /= np.linalg.norm(d1)
    axis = np.cross(d1, rng.normal(size=3))
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(min_angle, max_angle))
    d2 = d1 * np.cos(ang) + np.cross(axis, d1) * np.sin(ang)
    cams = []
    for k, d in enumerate((d1, d2)):
        c = X + rng.uniform(2.0, 4.0) * d
        target = X + rng.normal(scale=0.1, size=3)
        cams.append(make_camera(c, target, rng.uniform(*f_range), width, height, k))
    return X, cams[0], cams[1]


def tiny_set(rng, n=3, with_rays=False, cam=None):
    """A few Gaussians in front of a camera at the origin looking down +z."""
    mu = np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(2.0, 3.0, n)])
    log_scale = np.log(rng.uniform(0.15, 0.35, (n, 3)))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    color = rng.uniform(0.1, 0.9, (n, 3))
    opacity = rng.uniform(0.3, 0.8, n)
    if not with_rays:
        return HybridGaussianSet.from_ordinary(mu, log_scale, quat, color, opacity, 0.5, 5.0)
    # last two Gaussians become a ray-based pair through the same point
    assert cam is not None and n >= 3
    o = np.array([cam.pose.t, cam.pose.t + np.array([0.3, 0.0, 0.0])])
    X = mu[-1]
    d = X - o
    z = np.linalg.norm(d, axis=1)
    d /= z[:, None]
    return HybridGaussianSet(
        mu=mu[:-2], ray_origin=o, ray_dir=d, z=z, ray_view=[0, 1], ray_pixel=np.zeros((2, 2)), pairs=[[0, 1]],
        log_scale=log_scale, quat=quat, color=color, opacity=opacity, z_near=0.5, z_far=10.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_scene():
    from gesplat.harness.synth import reference_spec, synth_scene

    return synth_scene(reference_spec())


@pytest.fixture(scope="session")
def exact_scene():
    from gesplat.harness.synth import reference_spec, synth_scene

    return synth_scene(reference_spec(pose_sigma_deg=0.0, pose_sigma_frac=0.0, point_sigma=0.0))


_ACCEPTANCE = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
