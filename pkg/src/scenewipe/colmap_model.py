"""COLMAP sparse-reconstruction model: parsing, writing, and queries.

Both standard on-disk layouts are supported:

Text (``cameras.txt`` / ``images.txt`` / ``points3D.txt``):
  cameras:  CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]
  images:   two lines per image,
            IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME
            then POINTS2D[] as (X, Y, POINT3D_ID), -1 meaning no track
  points3D: POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)

Binary (``cameras.bin`` / ``images.bin`` / ``points3D.bin``), all
little-endian:
  cameras:  u64 count, then {i32 camera_id, i32 model_id, u64 width,
            u64 height, f64 params[model]}
  images:   u64 count, then {i32 image_id, f64 q[4], f64 t[3],
            i32 camera_id, null-terminated name, u64 n,
            {f64 x, f64 y, i64 point3d_id}}
  points3D: u64 count, then {i64 id, f64 xyz[3], u8 rgb[3], f64 error,
            u64 track_len, {i32 image_id, i32 point2d_idx}}

Only SIMPLE_PINHOLE and PINHOLE camera models are accepted; anything
else raises ModelFormatError ("unsupported camera model").
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DanglingReferenceError, ModelFormatError
from .geometry import (
    CAMERA_MODEL_BY_ID,
    SUPPORTED_CAMERA_MODELS,
    CameraIntrinsics,
    Pose,
    rasterize,
)
from .masks import Mask

# point3d_id used for keypoints without a 3D track.
NO_POINT3D = -1


@dataclass
class PosedImage:
    """A registered view: pose plus its 2D keypoints and 3D tracks.

    Keypoints are stored as parallel arrays: xys (n, 2) float64 and
    point3d_ids (n,) int64 with NO_POINT3D marking untracked keypoints.
    """

    image_id: int
    name: str
    camera_id: int
    pose: Pose
    xys: np.ndarray
    point3d_ids: np.ndarray

    def __post_init__(self):
        self.xys = np.asarray(self.xys, dtype=np.float64).reshape(-1, 2)
        self.point3d_ids = np.asarray(self.point3d_ids, dtype=np.int64).reshape(-1)
        if self.xys.shape[0] != self.point3d_ids.shape[0]:
            raise ValueError("keypoint coordinate/id arrays differ in length")

    def num_keypoints(self):
        return self.xys.shape[0]


@dataclass
class Point3D:
    """Triangulated point with its observation track."""

    point3d_id: int
    xyz: np.ndarray
    rgb: np.ndarray
    error: float
    track: list  # [(image_id, point2d_idx), ...]

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(3)
        self.track = [(int(i), int(k)) for i, k in self.track]


@dataclass
class SparseModel:
    """Immutable-by-convention sparse reconstruction.

    view_order lists image ids sorted by image name ascending, so
    downstream per-view outputs are stable across parse runs.
    clamp_report maps image_id -> number of keypoints whose coordinates
    had to be clamped into [0, width) x [0, height) at load time.
    """

    cameras: dict
    images: dict
    points: dict
    view_order: list = field(default_factory=list)
    clamp_report: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.view_order:
            self.view_order = sorted(self.images, key=lambda i: self.images[i].name)

    def validate(self):
        """Check referential integrity in both directions; raise on failure."""
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise DanglingReferenceError(
                    f"image {img.image_id} references missing camera {img.camera_id}"
                )
            for pid in img.point3d_ids:
                if pid != NO_POINT3D and int(pid) not in self.points:
                    raise DanglingReferenceError(
                        f"image {img.image_id} keypoint references missing "
                        f"point3d {int(pid)}"
                    )
        for pt in self.points.values():
            for image_id, kp_idx in pt.track:
                img = self.images.get(image_id)
                if img is None:
                    raise DanglingReferenceError(
                        f"point3d {pt.point3d_id} track references missing "
                        f"image {image_id}"
                    )
                if not 0 <= kp_idx < img.num_keypoints():
                    raise DanglingReferenceError(
                        f"point3d {pt.point3d_id} track references keypoint "
                        f"{kp_idx} out of range in image {image_id}"
                    )
                if int(img.point3d_ids[kp_idx]) != pt.point3d_id:
                    raise DanglingReferenceError(
                        f"point3d {pt.point3d_id} track disagrees with keypoint "
                        f"{kp_idx} of image {image_id}"
                    )

    def view_ids(self):
        return list(self.view_order)


def _clamp_keypoints(model: SparseModel):
    """Clamp keypoints into image bounds, recording counts per image."""
    for img in model.images.values():
        cam = model.cameras.get(img.camera_id)
        if cam is None or img.num_keypoints() == 0:
            continue
        hi_x = np.nextafter(float(cam.width), 0.0)
        hi_y = np.nextafter(float(cam.height), 0.0)
        clipped = np.column_stack(
            [np.clip(img.xys[:, 0], 0.0, hi_x), np.clip(img.xys[:, 1], 0.0, hi_y)]
        )
        n_clamped = int(np.sum(np.any(clipped != img.xys, axis=1)))
        if n_clamped:
            model.clamp_report[img.image_id] = n_clamped
            img.xys = clipped


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def _data_lines(path: Path):
    """Yield (line_number, stripped_line) skipping comments and blanks."""
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _require_file(dir_path: Path, name: str):
    p = dir_path / name
    if not p.is_file():
        raise ModelFormatError(p, "missing model file")
    return p


def _parse_cameras_text(path: Path):
    cameras = {}
    for lineno, line in _data_lines(path):
        elems = line.split()
        if len(elems) < 4:
            raise ModelFormatError(path, "camera line too short", line=lineno)
        try:
            camera_id = int(elems[0])
            model = elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(p) for p in elems[4:]]
        except ValueError as e:
            raise ModelFormatError(path, str(e), line=lineno) from None
        if model not in SUPPORTED_CAMERA_MODELS:
            raise ModelFormatError(
                path, f"unsupported camera model {model!r}", line=lineno
            )
        try:
            cameras[camera_id] = CameraIntrinsics.from_params(
                camera_id, model, width, height, params
            )
        except ValueError as e:
            raise ModelFormatError(path, str(e), line=lineno) from None
    return cameras


def _parse_images_text(path: Path):
    images = {}
    header = None
    header_line = 0
    for lineno, line in _data_lines(path):
        if header is None:
            elems = line.split()
            if len(elems) != 10:
                raise ModelFormatError(
                    path, f"image header has {len(elems)} fields, expected 10",
                    line=lineno,
                )
            header = elems
            header_line = lineno
            continue
        elems = line.split()
        if len(elems) % 3 != 0:
            raise ModelFormatError(
                path, "keypoint line length not a multiple of 3", line=lineno
            )
        try:
            image_id = int(header[0])
            qvec = [float(v) for v in header[1:5]]
            tvec = [float(v) for v in header[5:8]]
            camera_id = int(header[8])
            name = header[9]
            xys = np.array(
                [[float(elems[i]), float(elems[i + 1])] for i in range(0, len(elems), 3)]
            ).reshape(-1, 2)
            pids = np.array(
                [int(elems[i + 2]) for i in range(0, len(elems), 3)], dtype=np.int64
            )
        except ValueError as e:
            raise ModelFormatError(path, str(e), line=header_line) from None
        images[image_id] = PosedImage(
            image_id, name, camera_id, Pose.from_qt(qvec, tvec), xys, pids
        )
        header = None
    if header is not None:
        # COLMAP always writes the keypoint line, possibly empty; an empty
        # line is consumed by _data_lines, so treat a dangling header as
        # an image without keypoints.
        elems = header
        images[int(elems[0])] = PosedImage(
            int(elems[0]),
            elems[9],
            int(elems[8]),
            Pose.from_qt([float(v) for v in elems[1:5]], [float(v) for v in elems[5:8]]),
            np.empty((0, 2)),
            np.empty((0,), dtype=np.int64),
        )
    return images


def _parse_points_text(path: Path):
    points = {}
    for lineno, line in _data_lines(path):
        elems = line.split()
        if len(elems) < 8 or (len(elems) - 8) % 2 != 0:
            raise ModelFormatError(path, "malformed point3D line", line=lineno)
        try:
            pid = int(elems[0])
            xyz = [float(v) for v in elems[1:4]]
            rgb = [int(v) for v in elems[4:7]]
            error = float(elems[7])
            track = [
                (int(elems[i]), int(elems[i + 1])) for i in range(8, len(elems), 2)
            ]
        except ValueError as e:
            raise ModelFormatError(path, str(e), line=lineno) from None
        points[pid] = Point3D(pid, xyz, rgb, error, track)
    return points


def parse_text_model(dir_path) -> SparseModel:
    """Parse a text-format sparse model directory into a SparseModel."""
    dir_path = Path(dir_path)
    cameras = _parse_cameras_text(_require_file(dir_path, "cameras.txt"))
    images = _parse_images_text(_require_file(dir_path, "images.txt"))
    points = _parse_points_text(_require_file(dir_path, "points3D.txt"))
    model = SparseModel(cameras, images, points)
    model.validate()
    _clamp_keypoints(model)
    return model


def _fmt(x):
    """Full-precision float formatting so text round-trips are exact."""
    return repr(float(x))


def write_text_model(model: SparseModel, dir_path):
    """Write the three text model files; output re-parses to an equal model."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    with open(dir_path / "cameras.txt", "w", encoding="utf-8") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        f.write(f"# Number of cameras: {len(model.cameras)}\n")
        for cam in sorted(model.cameras.values(), key=lambda c: c.camera_id):
            params = " ".join(_fmt(p) for p in cam.params)
            f.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")

    with open(dir_path / "images.txt", "w", encoding="utf-8") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        f.write(f"# Number of images: {len(model.images)}\n")
        for img in sorted(model.images.values(), key=lambda i: i.image_id):
            q = " ".join(_fmt(v) for v in img.pose.qvec)
            t = " ".join(_fmt(v) for v in img.pose.tvec)
            f.write(f"{img.image_id} {q} {t} {img.camera_id} {img.name}\n")
            kps = " ".join(
                f"{_fmt(x)} {_fmt(y)} {int(pid)}"
                for (x, y), pid in zip(img.xys, img.point3d_ids)
            )
            f.write(kps + "\n")

    with open(dir_path / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write(
            "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, "
            "TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
        )
        f.write(f"# Number of points: {len(model.points)}\n")
        for pt in sorted(model.points.values(), key=lambda p: p.point3d_id):
            xyz = " ".join(_fmt(v) for v in pt.xyz)
            rgb = " ".join(str(int(v)) for v in pt.rgb)
            track = " ".join(f"{i} {k}" for i, k in pt.track)
            line = f"{pt.point3d_id} {xyz} {rgb} {_fmt(pt.error)}"
            f.write(line + (" " + track if track else "") + "\n")


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------


class _BinReader:
    def __init__(self, path: Path):
        self.path = path
        self.f = open(path, "rb")

    def close(self):
        self.f.close()

    def read(self, fmt):
        size = struct.calcsize("<" + fmt)
        offset = self.f.tell()
        data = self.f.read(size)
        if len(data) != size:
            raise ModelFormatError(self.path, "truncated file", offset=offset)
        return struct.unpack("<" + fmt, data)

    def read_cstring(self):
        chars = []
        while True:
            offset = self.f.tell()
            c = self.f.read(1)
            if c == b"":
                raise ModelFormatError(
                    self.path, "truncated file inside string", offset=offset
                )
            if c == b"\x00":
                return b"".join(chars).decode("utf-8")
            chars.append(c)


def _parse_cameras_binary(path: Path):
    cameras = {}
    r = _BinReader(path)
    try:
        (count,) = r.read("Q")
        for _ in range(count):
            camera_id, model_id, width, height = r.read("iiQQ")
            model = CAMERA_MODEL_BY_ID.get(model_id)
            if model is None:
                raise ModelFormatError(
                    path, f"unsupported camera model id {model_id}",
                    offset=r.f.tell(),
                )
            n_params = 3 if model == "SIMPLE_PINHOLE" else 4
            params = r.read("d" * n_params)
            try:
                cameras[camera_id] = CameraIntrinsics.from_params(
                    camera_id, model, int(width), int(height), params
                )
            except ValueError as e:
                raise ModelFormatError(path, str(e), offset=r.f.tell()) from None
    finally:
        r.close()
    return cameras


def _parse_images_binary(path: Path):
    images = {}
    r = _BinReader(path)
    try:
        (count,) = r.read("Q")
        for _ in range(count):
            vals = r.read("idddddddi")
            image_id, camera_id = vals[0], vals[8]
            qvec, tvec = vals[1:5], vals[5:8]
            name = r.read_cstring()
            (n_points,) = r.read("Q")
            xys = np.empty((n_points, 2))
            pids = np.empty((n_points,), dtype=np.int64)
            if n_points:
                flat = r.read("ddq" * n_points)
                xys[:, 0] = flat[0::3]
                xys[:, 1] = flat[1::3]
                pids[:] = flat[2::3]
            images[image_id] = PosedImage(
                image_id, name, camera_id, Pose.from_qt(qvec, tvec), xys, pids
            )
    finally:
        r.close()
    return images


def _parse_points_binary(path: Path):
    points = {}
    r = _BinReader(path)
    try:
        (count,) = r.read("Q")
        for _ in range(count):
            pid, x, y, z, cr, cg, cb, error = r.read("qdddBBBd")
            (track_len,) = r.read("Q")
            track = []
            if track_len:
                flat = r.read("ii" * track_len)
                track = list(zip(flat[0::2], flat[1::2]))
            points[pid] = Point3D(pid, [x, y, z], [cr, cg, cb], error, track)
    finally:
        r.close()
    return points


def parse_binary_model(dir_path) -> SparseModel:
    """Parse a binary-format sparse model directory into a SparseModel."""
    dir_path = Path(dir_path)
    cameras = _parse_cameras_binary(_require_file(dir_path, "cameras.bin"))
    images = _parse_images_binary(_require_file(dir_path, "images.bin"))
    points = _parse_points_binary(_require_file(dir_path, "points3D.bin"))
    model = SparseModel(cameras, images, points)
    model.validate()
    _clamp_keypoints(model)
    return model


def write_binary_model(model: SparseModel, dir_path):
    """Write the three binary model files (round-trip support)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    with open(dir_path / "cameras.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.cameras)))
        for cam in sorted(model.cameras.values(), key=lambda c: c.camera_id):
            model_id = SUPPORTED_CAMERA_MODELS[cam.model]
            f.write(struct.pack("<iiQQ", cam.camera_id, model_id, cam.width, cam.height))
            f.write(struct.pack("<" + "d" * len(cam.params), *cam.params))

    with open(dir_path / "images.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.images)))
        for img in sorted(model.images.values(), key=lambda i: i.image_id):
            f.write(
                struct.pack(
                    "<idddddddi",
                    img.image_id,
                    *img.pose.qvec,
                    *img.pose.tvec,
                    img.camera_id,
                )
            )
            f.write(img.name.encode("utf-8") + b"\x00")
            f.write(struct.pack("<Q", img.num_keypoints()))
            for (x, y), pid in zip(img.xys, img.point3d_ids):
                f.write(struct.pack("<ddq", x, y, int(pid)))

    with open(dir_path / "points3D.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.points)))
        for pt in sorted(model.points.values(), key=lambda p: p.point3d_id):
            f.write(
                struct.pack(
                    "<qdddBBBd", pt.point3d_id, *pt.xyz, *pt.rgb.tolist(), pt.error
                )
            )
            f.write(struct.pack("<Q", len(pt.track)))
            for image_id, kp_idx in pt.track:
                f.write(struct.pack("<ii", image_id, kp_idx))


def detect_model_format(dir_path):
    """Return "text" or "binary" by which file set is present."""
    dir_path = Path(dir_path)
    if (dir_path / "cameras.bin").is_file():
        return "binary"
    if (dir_path / "cameras.txt").is_file():
        return "text"
    raise ModelFormatError(dir_path, "no cameras.txt or cameras.bin found")


def parse_model(dir_path, fmt="auto") -> SparseModel:
    if fmt == "auto":
        fmt = detect_model_format(dir_path)
    if fmt == "text":
        return parse_text_model(dir_path)
    if fmt == "binary":
        return parse_binary_model(dir_path)
    raise ValueError(f"unknown model format {fmt!r}")


def models_equal(a: SparseModel, b: SparseModel, tol=1e-9):
    """Field-wise model comparison with a float tolerance."""
    if set(a.cameras) != set(b.cameras) or set(a.images) != set(b.images):
        return False
    if set(a.points) != set(b.points):
        return False
    for cid, ca in a.cameras.items():
        cb = b.cameras[cid]
        if (ca.model, ca.width, ca.height) != (cb.model, cb.width, cb.height):
            return False
        if np.max(np.abs(np.array(ca.params) - np.array(cb.params))) > tol:
            return False
    for iid, ia in a.images.items():
        ib = b.images[iid]
        if (ia.name, ia.camera_id) != (ib.name, ib.camera_id):
            return False
        if np.max(np.abs(ia.pose.qvec - ib.pose.qvec)) > tol:
            return False
        if np.max(np.abs(ia.pose.tvec - ib.pose.tvec)) > tol:
            return False
        if ia.num_keypoints() != ib.num_keypoints():
            return False
        if ia.num_keypoints() and np.max(np.abs(ia.xys - ib.xys)) > tol:
            return False
        if not np.array_equal(ia.point3d_ids, ib.point3d_ids):
            return False
    for pid, pa in a.points.items():
        pb = b.points[pid]
        if np.max(np.abs(pa.xyz - pb.xyz)) > tol or abs(pa.error - pb.error) > tol:
            return False
        if not np.array_equal(pa.rgb, pb.rgb) or pa.track != pb.track:
            return False
    return a.view_order == b.view_order


def masked_keypoints(model: SparseModel, view_id, mask: Mask):
    """Keypoints of one view that carry a 3D track and fall on mask foreground.

    Returns a list of ((x, y), point3d_id) pairs in keypoint order.
    Raises ValueError when the mask dimensions do not match the view.
    """
    img = model.images.get(view_id)
    if img is None:
        raise KeyError(f"view {view_id} not in model")
    cam = model.cameras[img.camera_id]
    if (mask.width, mask.height) != (cam.width, cam.height):
        raise ValueError(
            f"mask is {mask.width}x{mask.height}, view is {cam.width}x{cam.height}"
        )
    out = []
    for (x, y), pid in zip(img.xys, img.point3d_ids):
        if pid == NO_POINT3D:
            continue
        px = min(max(rasterize(x), 0), mask.width - 1)
        py = min(max(rasterize(y), 0), mask.height - 1)
        if mask.bitmap[py, px]:
            out.append(((float(x), float(y)), int(pid)))
    return out
