import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gesplat import geometry
from gesplat.errors import CoincidentCameras, DegenerateLine, EpipoleAtInfinity, GeometryError, PointBehindCamera

from conftest import make_camera, random_two_view


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        geometry.CameraIntrinsics(0.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(GeometryError):
        geometry.CameraIntrinsics(1.0, 1.0, 0, 0, 0, 4)
    K = geometry.CameraIntrinsics(100.0, 120.0, 31.5, 23.5, 64, 48)
    np.testing.assert_allclose(K.K @ K.K_inv, np.eye(3), atol=1e-15)


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        geometry.CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        geometry.CameraPose(2 * np.eye(3), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_roundtrip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = geometry.quat_to_rotmat(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    q2 = geometry.rotmat_to_quat(R)
    assert q2[0] >= 0
    # q and -q are the same rotation
    assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9


def test_axis_angle_and_rotation_angle():
    R = geometry.axis_angle_to_rotmat([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert geometry.rotation_angle(np.eye(3), R) == pytest.approx(np.pi / 2)
    np.testing.assert_array_equal(geometry.axis_angle_to_rotmat(np.zeros(3)), np.eye(3))


def test_project_backproject_roundtrip(rng):
    cam = make_camera([0.3, -0.2, -3.0], [0, 0, 0], f=110.0)
    p = rng.uniform(0, 60, (20, 2))
    depth = rng.uniform(1.0, 5.0, 20)
    X = geometry.backproject(p, depth, cam.intrinsics, cam.pose)
    np.testing.assert_allclose(geometry.project(X, cam.intrinsics, cam.pose), p, atol=1e-10)
    Xc = geometry.world_to_camera(X, cam.pose.R, cam.pose.t)
    np.testing.assert_allclose(Xc[:, 2], depth, rtol=1e-12)


def test_project_behind_camera():
    cam = make_camera([0, 0, -3.0], [0, 0, 0])
    with pytest.raises(PointBehindCamera):
        geometry.project([0, 0, -4.0], cam.intrinsics, cam.pose)


def test_principal_point_projects_along_axis():
    cam = make_camera([0, 0, -3.0], [0, 0, 0], width=65, height=49)
    np.testing.assert_allclose(geometry.project([0, 0, 0], cam.intrinsics, cam.pose), [32, 24], atol=1e-12)


def test_pixel_to_ray(rng):
    cam = make_camera([1.0, 0.5, -2.0], [0, 0, 0])
    p = rng.uniform(0, 40, (5, 2))
    ray = geometry.pixel_to_ray(p, cam.intrinsics, cam.pose)
    np.testing.assert_allclose(np.linalg.norm(ray.d, axis=1), 1.0)
    pts = ray.at(np.full(5, 2.5))
    np.testing.assert_allclose(geometry.project(pts, cam.intrinsics, cam.pose), p, atol=1e-10)


def test_epipolar_constraint(rng):
    for _ in range(50):
        X, ci, cj = random_two_view(rng)
        F = geometry.fundamental_matrix(ci.intrinsics, ci.pose, cj.intrinsics, cj.pose)
        pi = geometry.project(X, ci.intrinsics, ci.pose)
        pj = geometry.project(X, cj.intrinsics, cj.pose)
        line = geometry.epipolar_line(pi, F)
        assert geometry.point_line_distance(pj, line) < 1e-8


def test_epipolar_line_through_epipole(rng):
    while True:
        X, ci, cj = random_two_view(rng)
        if geometry.world_to_camera(ci.pose.t, cj.pose.R, cj.pose.t)[2] > 0.1:
            break
    F = geometry.fundamental_matrix(ci.intrinsics, ci.pose, cj.intrinsics, cj.pose)
    epi = geometry.epipole_and_baseline(ci.pose, cj.pose, cj.intrinsics)
    lines = geometry.epipolar_lines(rng.uniform(0, 100, (10, 2)), F)
    assert np.all(geometry.point_line_distance(epi.epipole, lines) < 1e-7)
    assert epi.baseline == pytest.approx(np.linalg.norm(ci.pose.t - cj.pose.t))


def test_degenerate_two_view():
    c = make_camera([0, 0, -3.0], [0, 0, 0])
    with pytest.raises(CoincidentCameras):
        geometry.fundamental_matrix(c.intrinsics, c.pose, c.intrinsics, c.pose)
    # pure translation along the optical axis: the epipole is the principal point
    back = make_camera([0, 0, -4.0], [0, 0, 0])
    F = geometry.fundamental_matrix(back.intrinsics, back.pose, c.intrinsics, c.pose)
    e_i = geometry.project(c.pose.t, back.intrinsics, back.pose)
    with pytest.raises(DegenerateLine):
        geometry.epipolar_line(e_i, F)
    with pytest.raises(EpipoleAtInfinity):
        geometry.epipole_and_baseline(back.pose, c.pose, c.intrinsics)


def test_image_plane_point_preserves_pixel_distances(rng):
    K = geometry.CameraIntrinsics(150.0, 150.0, 10.0, 20.0, 64, 48)
    a, b = rng.uniform(0, 60, (2, 2))
    qa, qb = geometry.image_plane_point(np.stack([a, b]), K)
    assert np.linalg.norm(qa - qb) == pytest.approx(np.linalg.norm(a - b))
    assert qa[2] == K.fx


def test_torch_and_numpy_quaternion_agree(rng):
    import torch

    q = rng.normal(size=(5, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    np.testing.assert_allclose(geometry.quat_to_rotmat(torch.from_numpy(q)).numpy(), geometry.quat_to_rotmat(q), atol=0)
