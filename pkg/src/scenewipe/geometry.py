"""Pinhole camera geometry: poses, projection, and ray casting.

Conventions used throughout the package:
  - world-to-camera transform p_cam = R @ p_world + t, with R stored as a
    unit quaternion (qw, qx, qy, qz);
  - camera frame: x right, y down, z forward (optical axis);
  - the continuous image plane is addressed directly by keypoint
    coordinates; pixel i covers [i - 0.5, i + 0.5), so rasterization
    rounds to nearest with ties toward +inf.
"""

from dataclasses import dataclass

import numpy as np

# Points with camera-frame z at or below this are treated as behind the camera.
Z_MIN = 1e-6

SUPPORTED_CAMERA_MODELS = {"SIMPLE_PINHOLE": 0, "PINHOLE": 1}
CAMERA_MODEL_BY_ID = {v: k for k, v in SUPPORTED_CAMERA_MODELS.items()}


class _Sentinel:
    """Named singleton for non-error projection outcomes."""

    __slots__ = ("_name",)

    def __init__(self, name):
        self._name = name

    def __repr__(self):
        return self._name

    def __bool__(self):
        return False


BEHIND = _Sentinel("BEHIND")
OUT = _Sentinel("OUT")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; model is SIMPLE_PINHOLE (fx == fy) or PINHOLE."""

    camera_id: int
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.model not in SUPPORTED_CAMERA_MODELS:
            raise ValueError(f"unsupported camera model {self.model!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.model == "SIMPLE_PINHOLE" and self.fx != self.fy:
            raise ValueError("SIMPLE_PINHOLE requires fx == fy")

    @property
    def params(self):
        if self.model == "SIMPLE_PINHOLE":
            return [self.fx, self.cx, self.cy]
        return [self.fx, self.fy, self.cx, self.cy]

    @staticmethod
    def from_params(camera_id, model, width, height, params):
        params = [float(p) for p in params]
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ValueError("SIMPLE_PINHOLE takes 3 params (f, cx, cy)")
            f, cx, cy = params
            return CameraIntrinsics(camera_id, model, width, height, f, f, cx, cy)
        if model == "PINHOLE":
            if len(params) != 4:
                raise ValueError("PINHOLE takes 4 params (fx, fy, cx, cy)")
            fx, fy, cx, cy = params
            return CameraIntrinsics(camera_id, model, width, height, fx, fy, cx, cy)
        raise ValueError(f"unsupported camera model {model!r}")


def quat_to_rotmat(qvec):
    """Rotation matrix from a unit quaternion (qw, qx, qy, qz)."""
    w, x, y, z = qvec
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * z * w, 2 * x * z + 2 * y * w],
            [2 * x * y + 2 * z * w, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * x * w],
            [2 * x * z - 2 * y * w, 2 * y * z + 2 * x * w, 1 - 2 * x * x - 2 * y * y],
        ],
        dtype=np.float64,
    )


def rotmat_to_quat(R):
    """Unit quaternion (qw, qx, qy, qz) from a rotation matrix, qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    K = (
        np.array(
            [
                [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
                [R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
                [R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1], 0],
                [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: unit quaternion + translation."""

    qvec: np.ndarray
    tvec: np.ndarray

    @staticmethod
    def from_qt(qvec, tvec):
        """Build a pose, normalizing the quaternion."""
        q = np.asarray(qvec, dtype=np.float64).reshape(4).copy()
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValueError("degenerate (zero) quaternion")
        q /= norm
        t = np.asarray(tvec, dtype=np.float64).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        return Pose(q, t)

    @staticmethod
    def identity():
        return Pose.from_qt([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

    @staticmethod
    def from_rotation(R, tvec):
        return Pose.from_qt(rotmat_to_quat(R), tvec)

    def rotation(self):
        return quat_to_rotmat(self.qvec)

    def camera_center(self):
        """Camera position in world coordinates, -R^T t."""
        return -self.rotation().T @ self.tvec


@dataclass(frozen=True)
class Ray:
    """Ray o + t*d with unit direction, marched over (t_near, t_far)."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("require 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


def rasterize(coord):
    """Continuous image coordinate -> pixel index (nearest, ties toward +inf)."""
    return int(np.floor(float(coord) + 0.5))


def world_to_camera(pose: Pose, p_world):
    """Apply R p + t; accepts a single point (3,) or a batch (N, 3)."""
    p = np.asarray(p_world, dtype=np.float64)
    return p @ pose.rotation().T + pose.tvec


def project_normalized(p_cam):
    """Perspective-divide a camera-frame point onto the z=1 plane.

    Returns (x/z, y/z), or BEHIND when z <= Z_MIN.
    """
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    if z <= Z_MIN:
        return BEHIND
    return (x / z, y / z)


def project_to_pixel(cam: CameraIntrinsics, pose: Pose, p_world):
    """Project a world point to continuous pixel coordinates.

    Returns (u, v), or OUT when the point is behind the camera or lands
    outside [0, width) x [0, height).
    """
    ndc = project_normalized(world_to_camera(pose, p_world))
    if ndc is BEHIND:
        return OUT
    u = cam.fx * ndc[0] + cam.cx
    v = cam.fy * ndc[1] + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return OUT
    return (u, v)


def project_points_to_pixels(cam: CameraIntrinsics, pose: Pose, points):
    """Vectorized projection of an (N, 3) world-point array.

    Returns (uv, valid): uv is (N, 2) with rows meaningful only where
    valid is True; invalid rows are behind the camera or out of frame.
    """
    p_cam = world_to_camera(pose, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p_cam[:, 2]
    in_front = z > Z_MIN
    zsafe = np.where(in_front, z, 1.0)
    u = cam.fx * p_cam[:, 0] / zsafe + cam.cx
    v = cam.fy * p_cam[:, 1] / zsafe + cam.cy
    uv = np.stack([u, v], axis=1)
    valid = in_front & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return uv, valid


def pixel_to_ray(cam: CameraIntrinsics, pose: Pose, u, v, t_near, t_far):
    """Cast the world-space viewing ray through image coordinate (u, v)."""
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    R = pose.rotation()
    d_world = R.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(-R.T @ pose.tvec, d_world, float(t_near), float(t_far))


def camera_ray_grid(cam: CameraIntrinsics, pose: Pose, width=None, height=None):
    """Per-pixel unit ray directions plus the shared origin for a full image.

    Rays pass through integer pixel coordinates (the pixel centers under
    the package convention). Returns (origin (3,), dirs (h*w, 3)) with
    pixels in row-major order.
    """
    w = cam.width if width is None else width
    h = cam.height if height is None else height
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1
    ).reshape(-1, 3)
    R = pose.rotation()
    d_world = d_cam @ R
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = -R.T @ pose.tvec
    return origin, d_world
