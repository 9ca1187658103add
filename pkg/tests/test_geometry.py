import numpy as np
import pytest

from scenewipe.geometry import (
    BEHIND,
    OUT,
    CameraIntrinsics,
    Pose,
    Ray,
    camera_ray_grid,
    pixel_to_ray,
    project_normalized,
    project_points_to_pixels,
    project_to_pixel,
    quat_to_rotmat,
    rasterize,
    rotmat_to_quat,
    world_to_camera,
)


def random_quat(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def test_quat_rotmat_round_trip():
    rng = np.random.default_rng(11)
    for _ in range(200):
        q = random_quat(rng)
        R = quat_to_rotmat(q)
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12
        assert np.allclose(rotmat_to_quat(R), q, atol=1e-9)


def test_quat_identity_and_axis():
    assert np.allclose(quat_to_rotmat([1.0, 0, 0, 0]), np.eye(3))
    # 90 degrees about z maps x to y
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    assert np.allclose(quat_to_rotmat(q) @ [1.0, 0, 0], [0, 1, 0], atol=1e-12)


def test_pose_camera_center():
    rng = np.random.default_rng(3)
    pose = Pose.from_qt(random_quat(rng), rng.normal(size=3))
    # the center maps to the camera origin
    assert np.allclose(world_to_camera(pose, pose.camera_center()), 0.0, atol=1e-12)


def test_pose_from_rotation_matches_quaternion():
    rng = np.random.default_rng(8)
    q = random_quat(rng)
    pose = Pose.from_rotation(quat_to_rotmat(q), [1.0, 2.0, 3.0])
    assert np.allclose(pose.qvec, q, atol=1e-9)
    with pytest.raises(ValueError):
        Pose.from_qt([0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_rasterize_half_up():
    assert rasterize(0.0) == 0
    assert rasterize(0.49) == 0
    assert rasterize(0.5) == 1
    assert rasterize(1.49) == 1
    assert rasterize(-0.5) == 0
    assert rasterize(-0.51) == -1


def test_project_pixel_center_of_principal_ray():
    cam = CameraIntrinsics.from_params(1, "PINHOLE", 64, 48, [80.0, 80.0, 31.5, 23.5])
    uv = project_to_pixel(cam, Pose.identity(), [0.0, 0.0, 2.0])
    assert np.allclose(uv, [31.5, 23.5])


def test_project_sentinels():
    cam = CameraIntrinsics.from_params(1, "SIMPLE_PINHOLE", 32, 32, [40.0, 15.5, 15.5])
    assert project_normalized([0.0, 0.0, -1.0]) is BEHIND
    assert project_to_pixel(cam, Pose.identity(), [0.0, 0.0, -1.0]) is OUT
    assert project_to_pixel(cam, Pose.identity(), [10.0, 0.0, 1.0]) is OUT
    assert not OUT and not BEHIND  # falsy so `if uv:` guards work


def test_project_points_vectorized_matches_scalar():
    rng = np.random.default_rng(5)
    cam = CameraIntrinsics.from_params(1, "PINHOLE", 100, 80, [90.0, 95.0, 49.5, 39.5])
    # keep the camera roughly facing +z so some points land in frame
    pose = Pose.from_qt([1.0, *rng.normal(size=3) * 0.05], rng.normal(size=3) * 0.1)
    pts = rng.normal(size=(80, 3)) * 2.0 + np.array([0, 0, 3.0])
    uv, valid = project_points_to_pixels(cam, pose, pts)
    n_valid = 0
    for i, p in enumerate(pts):
        single = project_to_pixel(cam, pose, p)
        if single is OUT:
            assert not valid[i]
        else:
            assert valid[i]
            assert np.allclose(uv[i], single, atol=1e-12)
            n_valid += 1
    assert 0 < n_valid < len(pts)  # the sample exercises both branches


def test_pixel_ray_projection_round_trip():
    rng = np.random.default_rng(2)
    cam = CameraIntrinsics.from_params(1, "PINHOLE", 64, 64, [70.0, 75.0, 31.5, 31.5])
    pose = Pose.from_qt(random_quat(rng), rng.normal(size=3))
    for _ in range(100):
        u = rng.uniform(0, 63.999)
        v = rng.uniform(0, 63.999)
        ray = pixel_to_ray(cam, pose, u, v, 0.1, 10.0)
        uv = project_to_pixel(cam, pose, ray.at(rng.uniform(0.5, 5.0)))
        assert np.allclose(uv, [u, v], atol=1e-9)


def test_pixel_to_ray_bounds():
    cam = CameraIntrinsics.from_params(1, "SIMPLE_PINHOLE", 8, 8, [10.0, 3.5, 3.5])
    with pytest.raises(ValueError):
        pixel_to_ray(cam, Pose.identity(), 8.0, 0.0, 0.1, 2.0)
    with pytest.raises(ValueError):
        pixel_to_ray(cam, Pose.identity(), 0.0, -0.5, 0.1, 2.0)


def test_camera_ray_grid_layout_and_norms():
    cam = CameraIntrinsics.from_params(1, "PINHOLE", 6, 4, [9.0, 9.0, 2.5, 1.5])
    rng = np.random.default_rng(1)
    pose = Pose.from_qt(random_quat(rng), rng.normal(size=3))
    origin, dirs = camera_ray_grid(cam, pose)
    assert dirs.shape == (24, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    assert np.allclose(origin, pose.camera_center())
    # row-major: entry v*w + u matches the single-pixel ray through (u, v)
    for v in range(4):
        for u in range(6):
            ray = pixel_to_ray(cam, pose, float(u), float(v), 0.1, 2.0)
            assert np.allclose(dirs[v * 6 + u], ray.direction, atol=1e-12)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.1, 2.0)  # not unit
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0, 1.0)  # inverted span
    r = Ray(np.array([1.0, 0, 0]), np.array([0.0, 0, 1.0]), 0.0, 4.0)
    assert np.allclose(r.at(2.0), [1.0, 0, 2.0])
    assert r.at(np.array([1.0, 2.0])).shape == (2, 3)


def test_intrinsics_param_layout():
    simple = CameraIntrinsics.from_params(1, "SIMPLE_PINHOLE", 10, 10, [5.0, 4.5, 4.5])
    assert simple.fx == simple.fy == 5.0
    assert simple.params == [5.0, 4.5, 4.5]
    full = CameraIntrinsics.from_params(2, "PINHOLE", 10, 10, [5.0, 6.0, 4.5, 3.5])
    assert (full.fx, full.fy, full.cx, full.cy) == (5.0, 6.0, 4.5, 3.5)
    assert full.params == [5.0, 6.0, 4.5, 3.5]
    with pytest.raises(ValueError):
        CameraIntrinsics.from_params(3, "PINHOLE", 10, 10, [5.0, 4.5, 4.5])
    with pytest.raises(ValueError):
        CameraIntrinsics.from_params(4, "OPENCV", 10, 10, [5.0, 5.0, 4.5, 4.5])
    with pytest.raises(ValueError):
        CameraIntrinsics.from_params(5, "SIMPLE_PINHOLE", 0, 10, [5.0, 4.5, 4.5])
