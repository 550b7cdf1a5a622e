import numpy as np
import pytest
import torch

from gesplat import geometry
from gesplat.errors import NonPositiveDepth, ParallelRays, SkippedAllTerms
from gesplat.gaussians import HybridGaussianSet
from gesplat.matching import (
    CameraTensors,
    MatchPair,
    MatchSet,
    backproject_depth,
    gaussian_position_loss,
    midpoint_parameters,
    rendering_geometry_loss,
    triangulated_z,
)

from conftest import make_camera


@pytest.fixture
def two_cams():
    return {0: make_camera([0, 0, -3.0], [0, 0, 0], cam_id=0), 1: make_camera([0.8, 0.1, -3.0], [0, 0, 0], cam_id=1)}


def _pair_set(cams, X, z_offset=(0.0, 0.0)):
    pix = np.stack([geometry.project(X, cams[v].intrinsics, cams[v].pose) for v in (0, 1)])
    g = HybridGaussianSet(
        mu=np.zeros((0, 3)), ray_origin=np.zeros((2, 3)), ray_dir=np.zeros((2, 3)), z=[1.0, 1.0], ray_view=[0, 1],
        ray_pixel=pix, pairs=[[0, 1]], log_scale=np.zeros((2, 3)), quat=[[1.0, 0, 0, 0]] * 2,
        color=np.zeros((2, 3)), opacity=[0.5, 0.5], z_near=0.5, z_far=10.0,
    ).rebind_rays(cams)
    g.z = np.linalg.norm(X - g.ray_origin, axis=1) + np.asarray(z_offset)
    return g


def test_match_validation():
    with pytest.raises(ValueError):
        MatchPair(1, 1, (0, 0), (1, 1))
    with pytest.raises(ValueError):
        MatchPair(0, 1, (0, 0), (1, 1), weight=2.0)
    m = MatchSet.from_pairs([MatchPair(0, 1, (1, 2), (3, 4))])
    r = m.reversed()
    assert r[0] == MatchPair(1, 0, (3.0, 4.0), (1.0, 2.0))
    assert len(m.concat(r)) == 2 and len(MatchSet.empty()) == 0


def test_gaussian_position_loss_zero_at_truth(two_cams):
    g = _pair_set(two_cams, np.array([0.1, -0.2, 0.3]))
    assert gaussian_position_loss(g, cameras=two_cams) < 1e-10


def test_gaussian_position_loss_value(two_cams):
    X = np.array([0.1, -0.2, 0.3])
    g = _pair_set(two_cams, X, z_offset=(0.2, 0.0))
    moved = g.ray_positions()[0]
    e01 = np.linalg.norm(geometry.project(moved, two_cams[1].intrinsics, two_cams[1].pose) - g.ray_pixel[1])
    # the second member still sits on the truth, so its error in view 0 is zero
    assert gaussian_position_loss(g, cameras=two_cams) == pytest.approx(e01 / 2)


def test_gaussian_position_loss_gradient_wrt_z(two_cams):
    g = _pair_set(two_cams, np.array([0.1, -0.2, 0.3]), z_offset=(0.3, -0.2))
    z = torch.tensor(g.z, requires_grad=True)
    ray_means = torch.tensor(g.ray_origin) + z[:, None] * torch.tensor(g.ray_dir)
    cams_t = {v: CameraTensors(torch.tensor(c.pose.R), torch.tensor(c.pose.t), c.intrinsics) for v, c in two_cams.items()}
    gaussian_position_loss(g, cameras=cams_t, ray_means=ray_means).backward()
    h = 1e-6
    for k in range(2):
        zp, zm = g.z.copy(), g.z.copy()
        zp[k] += h
        zm[k] -= h
        fp = gaussian_position_loss(_with_z(g, zp), cameras=two_cams)
        fm = gaussian_position_loss(_with_z(g, zm), cameras=two_cams)
        assert float(z.grad[k]) == pytest.approx((fp - fm) / (2 * h), rel=1e-5)


def _with_z(g, z):
    h = g.copy()
    h.z = z
    return h


def test_behind_camera_term_is_capped(two_cams):
    g = _pair_set(two_cams, np.array([0.0, 0.0, 0.0]))
    g.z[0] = -1.0  # behind camera 1 as well
    cap = np.hypot(64, 48)
    assert gaussian_position_loss(g, cameras=two_cams) == pytest.approx(cap / 2, rel=1e-12)


def test_rendering_geometry_loss_exact_depth(two_cams):
    # a fronto-parallel plane at depth 3 in view 0; a constant depth map is exact wherever it is sampled
    pi = np.array([[20.0, 30.0]])
    X = geometry.backproject(pi, np.array([3.0]), two_cams[0].intrinsics, two_cams[0].pose)
    pj = geometry.project(X, two_cams[1].intrinsics, two_cams[1].pose)
    dz1 = geometry.world_to_camera(X, two_cams[1].pose.R, two_cams[1].pose.t)[0, 2]
    m = MatchSet([0], [1], pi, pj, [1])
    maps = {0: np.full((48, 64), 3.0), 1: np.full((48, 64), dz1)}
    assert rendering_geometry_loss(maps, m, two_cams) < 1e-9
    maps[1] = np.full((48, 64), 1.5 * dz1)
    assert rendering_geometry_loss(maps, m, two_cams) > 1.0


def test_rendering_geometry_loss_skips_nonpositive(two_cams):
    m = MatchSet([0], [1], [[10.0, 10.0]], [[12.0, 10.0]], [1])
    loss, skipped = rendering_geometry_loss({0: np.full((48, 64), 2.0), 1: np.zeros((48, 64))}, m, two_cams, return_skipped=True)
    assert skipped == 1 and np.isfinite(loss)
    with pytest.raises(SkippedAllTerms):
        rendering_geometry_loss({0: np.zeros((48, 64)), 1: np.zeros((48, 64))}, m, two_cams)


def test_backproject_depth(two_cams):
    with pytest.raises(NonPositiveDepth):
        backproject_depth([[1.0, 2.0]], [0.0], two_cams[0])
    c = two_cams[1]
    ct = CameraTensors(torch.tensor(c.pose.R), torch.tensor(c.pose.t), c.intrinsics)
    a = backproject_depth([[5.0, 7.0]], [2.0], c)
    b = backproject_depth(torch.tensor([[5.0, 7.0]]), torch.tensor([2.0]), ct)
    np.testing.assert_allclose(b.numpy(), a, atol=1e-14)


def test_triangulated_z_recovers_truth(two_cams):
    X = np.array([0.1, -0.2, 0.3])
    g = _pair_set(two_cams, X, z_offset=(0.5, -0.4))
    np.testing.assert_allclose(triangulated_z(g), np.linalg.norm(X - g.ray_origin, axis=1), rtol=1e-10)
    with pytest.raises(ParallelRays):
        midpoint_parameters(np.zeros(3), np.array([0, 0, 1.0]), np.ones(3), np.array([0, 0, 1.0]))
