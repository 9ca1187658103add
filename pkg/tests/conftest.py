import numpy as np
import pytest

from scenewipe.colmap_model import Point3D, PosedImage, SparseModel
from scenewipe.geometry import CameraIntrinsics, Pose, project_to_pixel
from scenewipe.synthetic import SceneSpec, emit_sparse_model, write_dataset


def make_small_model():
    """Hand-built two-camera, three-view model with a few tracked points."""
    cameras = {
        1: CameraIntrinsics.from_params(1, "PINHOLE", 64, 48, [70.0, 72.0, 31.5, 23.5]),
        2: CameraIntrinsics.from_params(2, "SIMPLE_PINHOLE", 32, 32, [40.0, 15.5, 15.5]),
    }
    poses = [
        Pose.from_qt([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.5]),
        Pose.from_qt([0.9, 0.1, -0.2, 0.05], [0.3, -0.1, 2.2]),
        Pose.from_qt([0.95, -0.05, 0.15, 0.0], [-0.4, 0.2, 2.8]),
    ]
    pts = {
        1: np.array([0.2, 0.1, 0.4]),
        2: np.array([-0.3, 0.25, -0.1]),
        3: np.array([0.05, -0.3, 0.2]),
        4: np.array([0.5, 0.4, -0.3]),
    }
    images = {}
    tracks = {pid: [] for pid in pts}
    for i, pose in enumerate(poses, start=1):
        cam = cameras[1 if i < 3 else 2]
        xys, pids = [], []
        for pid, xyz in pts.items():
            if (pid + i) % 4 == 0:  # leave some points unseen per view
                continue
            uv = project_to_pixel(cam, pose, xyz)
            if not uv:
                continue
            tracks[pid].append((i, len(xys)))
            xys.append([float(uv[0]), float(uv[1])])
            pids.append(pid)
        # one untracked keypoint per view
        xys.append([1.25, 2.5])
        pids.append(-1)
        images[i] = PosedImage(
            i, f"frame_{i:02d}.png", cam.camera_id, pose,
            np.array(xys, dtype=np.float64), np.array(pids, dtype=np.int64),
        )
    points = {}
    for pid, obs in tracks.items():
        if len(obs) < 2:
            for img_id, k in obs:
                images[img_id].point3d_ids[k] = -1
            continue
        points[pid] = Point3D(
            pid, pts[pid], np.array([10 * pid, 20, 200 - pid], dtype=np.uint8),
            0.5 + 0.1 * pid, obs,
        )
    model = SparseModel(cameras, images, points)
    model.validate()
    return model


@pytest.fixture
def small_model():
    return make_small_model()


@pytest.fixture(scope="session")
def scene_spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def scene_model(scene_spec):
    return emit_sparse_model(scene_spec, seed=0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, scene_spec):
    root = tmp_path_factory.mktemp("scene")
    write_dataset(scene_spec, root, model_format="text", seed=0)
    return root
