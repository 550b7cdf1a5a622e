import numpy as np
import pytest
import torch

from gesplat import geometry
from gesplat.errors import EmptyInput
from gesplat.gaussians import (
    OPACITY_MAX,
    HybridGaussianSet,
    clamp_z,
    covariance,
    depth_bounds,
    init_hybrid,
    knn_mean_distance,
)
from gesplat.matching import MatchSet

from conftest import make_camera, tiny_set


def test_covariance_is_spd_and_matches_torch(rng):
    ls = rng.normal(scale=0.5, size=(10, 3))
    q = rng.normal(size=(10, 4))
    C = covariance(ls, q)
    np.testing.assert_allclose(C, np.swapaxes(C, 1, 2), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(C) > 0)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(C), axis=1), np.sort(np.exp(2 * ls), axis=1), rtol=1e-10)
    Ct = covariance(torch.from_numpy(ls), torch.from_numpy(q)).numpy()
    np.testing.assert_allclose(Ct, C, rtol=1e-12, atol=1e-15)


def test_ray_positions_follow_z(rng):
    cam = make_camera([0, 0, -3.0], [0, 0, 0])
    g = tiny_set(rng, 4, with_rays=True, cam=cam)
    np.testing.assert_allclose(g.ray_positions(), g.ray_origin + g.z[:, None] * g.ray_dir)
    assert g.positions().shape == (4, 3)
    assert (g.n_ordinary, g.n_ray, g.n_total) == (2, 2, 4)


def test_validation():
    with pytest.raises(ValueError):
        HybridGaussianSet.from_ordinary(np.zeros((2, 3)), np.zeros((3, 3)), np.ones((2, 4)), np.zeros((2, 3)), np.zeros(2))
    g = HybridGaussianSet.empty()
    with pytest.raises(ValueError):
        HybridGaussianSet(
            mu=g.mu, ray_origin=np.zeros((1, 3)), ray_dir=[[0, 0, 1.0]], z=[1.0], ray_view=[0], ray_pixel=[[0, 0]],
            pairs=[[0, 1]], log_scale=np.zeros((1, 3)), quat=[[1.0, 0, 0, 0]], color=np.zeros((1, 3)), opacity=[0.5],
        )


def test_enforce_invariants(rng):
    cam = make_camera([0, 0, -3.0], [0, 0, 0])
    g = tiny_set(rng, 4, with_rays=True, cam=cam)
    g.quat *= 3.0
    g.opacity[:] = [1.5, -0.2, 0.5, 1.0]
    g.color[0] = [-1.0, 0.5, 2.0]
    g.z[:] = [0.0, 100.0]
    g.enforce_invariants()
    np.testing.assert_allclose(np.linalg.norm(g.quat, axis=1), 1.0)
    assert g.opacity.max() == OPACITY_MAX and g.opacity.min() == 0.0
    np.testing.assert_array_equal(g.color[0], [0.0, 0.5, 1.0])
    assert np.all((g.z > g.z_near) & (g.z < g.z_far))


def test_clamp_z_open_interval():
    z = clamp_z(np.array([0.0, 1.0, 10.0]), 0.5, 5.0)
    assert z[0] > 0.5 and z[1] == 1.0 and z[2] < 5.0


def test_copy_is_deep(rng):
    g = tiny_set(rng, 3)
    h = g.copy()
    h.mu[0, 0] = 99.0
    assert g.mu[0, 0] != 99.0


def test_rebind_and_to_ordinary(rng):
    cams = {0: make_camera([0, 0, -3.0], [0, 0, 0], cam_id=0), 1: make_camera([1, 0, -3.0], [0, 0, 0], cam_id=1)}
    g = HybridGaussianSet(
        mu=np.zeros((0, 3)), ray_origin=np.zeros((2, 3)), ray_dir=[[0, 0, 1.0]] * 2, z=[2.0, 2.5], ray_view=[0, 1],
        ray_pixel=[[10.0, 12.0], [30.0, 20.0]], pairs=[[0, 1]], log_scale=np.zeros((2, 3)),
        quat=[[1.0, 0, 0, 0]] * 2, color=np.zeros((2, 3)), opacity=[0.5, 0.5],
    )
    g.rebind_rays(cams)
    for k in range(2):
        cam = cams[int(g.ray_view[k])]
        np.testing.assert_allclose(geometry.project(g.ray_positions()[k], cam.intrinsics, cam.pose), g.ray_pixel[k], atol=1e-10)
    o = g.to_ordinary()
    assert o.n_ray == 0 and o.n_ordinary == 2
    np.testing.assert_array_equal(o.mu, g.positions())


def test_depth_bounds_and_knn():
    cam = make_camera([0, 0, -3.0], [0, 0, 0])
    pts = np.column_stack([np.zeros(101), np.zeros(101), np.linspace(-1, 1, 101)])
    lo, hi = depth_bounds(pts, [cam])
    assert lo == pytest.approx(2.02) and hi == pytest.approx(3.98)
    np.testing.assert_allclose(knn_mean_distance(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), k=1), [1, 1, 2])


def test_init_hybrid_absorbs_matched_points():
    cams = {0: make_camera([0, 0, -3.0], [0, 0, 0], cam_id=0), 1: make_camera([0.8, 0, -3.0], [0, 0, 0], cam_id=1)}
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, (40, 3))
    pi = geometry.project(pts[:3], cams[0].intrinsics, cams[0].pose)
    pj = geometry.project(pts[:3], cams[1].intrinsics, cams[1].pose)
    m = MatchSet([0] * 3, [1] * 3, pi, pj, [1.0] * 3)
    g = init_hybrid(pts, np.full((40, 3), 0.5), m, cams, seed=3, alpha_init=0.1)
    assert g.n_ordinary == 37 and g.n_ray == 6
    np.testing.assert_array_equal(g.pairs, [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(g.ray_view, [0, 1] * 3)
    assert np.all((g.z > g.z_near) & (g.z < g.z_far))
    np.testing.assert_allclose(g.opacity, 0.1)
    np.testing.assert_allclose(g.quat[:, 0], 1.0)
    # same seed, same set
    g2 = init_hybrid(pts, np.full((40, 3), 0.5), m, cams, seed=3, alpha_init=0.1)
    np.testing.assert_array_equal(g.z, g2.z)
    with pytest.raises(EmptyInput):
        init_hybrid(np.zeros((0, 3)), np.zeros((0, 3)), m, cams)
