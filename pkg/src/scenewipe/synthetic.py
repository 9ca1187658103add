"""Analytic test scenes: a textured room containing a removable object.

Every quantity the pipeline consumes has a closed form here: RGB and
depth images come from exact ray-primitive intersections, object masks
from first-hit tests, and the sparse reconstruction from surface points
projected with analytic occlusion checks. Colors are a function of the
3D hit point only, so a Lambertian field can represent the scene
exactly.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .colmap_model import NO_POINT3D, Point3D, PosedImage, SparseModel
from .geometry import CameraIntrinsics, Pose, camera_ray_grid, project_points_to_pixels, rasterize
from .masks import Mask, mask_filename, save_mask_png

_HIT_EPS = 1e-9
# inset fraction keeping sampled object keypoints away from face edges,
# so their projections stay strictly inside the silhouette in all views
_FACE_INSET = 0.12
_WALL_INSET = 0.02
# extra pixel margin when rejecting wall samples near any silhouette
_WALL_CLEAR_PX = 3.0


@dataclass
class SceneSpec:
    """Room-with-object scene description.

    The object is a sphere (object_size: radius) or an axis-aligned box
    (object_size: half extents). Cameras sit on a horizontal ring inside
    the room, all looking at look_at.
    """

    room_min: tuple = (-2.0, -2.0, -1.0)
    room_max: tuple = (2.0, 2.0, 2.0)
    object_kind: str = "box"
    object_center: tuple = (0.0, 0.0, 0.0)
    object_size: object = (0.35, 0.35, 0.35)
    object_albedo: tuple = (0.82, 0.32, 0.26)
    texture_seed: int = 7
    checker_cell: float = 1.2
    checker_contrast: float = 0.1
    n_views: int = 8
    ring_radius: float = 1.4
    ring_height: float = 0.5
    ring_start_deg: float = 22.5
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    focal: float = 60.0
    keypoints_per_surface: int = 160

    def __post_init__(self):
        self.room_min = tuple(float(v) for v in self.room_min)
        self.room_max = tuple(float(v) for v in self.room_max)
        self.object_center = tuple(float(v) for v in self.object_center)
        self.object_albedo = tuple(float(v) for v in self.object_albedo)
        self.look_at = tuple(float(v) for v in self.look_at)
        if self.object_kind not in ("sphere", "box"):
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if self.object_kind == "sphere":
            self.object_size = float(self.object_size)
        else:
            self.object_size = tuple(float(v) for v in np.reshape(self.object_size, 3))
        if self.n_views < 1:
            raise ValueError("need at least one view")
        lo, hi = np.array(self.room_min), np.array(self.room_max)
        if not np.all(lo < hi):
            raise ValueError("room bounds inverted")
        c = np.array(self.object_center)
        rho = self.object_circumradius()
        if not (np.all(c - rho > lo) and np.all(c + rho < hi)):
            raise ValueError("object must sit strictly inside the room")
        for pos in self.camera_positions():
            if np.linalg.norm(pos - c) <= rho:
                raise ValueError("camera ring intersects the object")
            if not (np.all(pos > lo) and np.all(pos < hi)):
                raise ValueError("camera ring leaves the room")

    def object_circumradius(self):
        if self.object_kind == "sphere":
            return float(self.object_size)
        return float(np.linalg.norm(self.object_size))

    def camera_positions(self):
        angles = np.deg2rad(self.ring_start_deg) + 2.0 * np.pi * np.arange(
            self.n_views
        ) / self.n_views
        cx, cy = self.look_at[0], self.look_at[1]
        return np.column_stack(
            [
                cx + self.ring_radius * np.cos(angles),
                cy + self.ring_radius * np.sin(angles),
                np.full(self.n_views, self.ring_height),
            ]
        )

    def to_dict(self):
        d = {
            "room_min": list(self.room_min),
            "room_max": list(self.room_max),
            "object_kind": self.object_kind,
            "object_center": list(self.object_center),
            "object_size": self.object_size
            if self.object_kind == "sphere"
            else list(self.object_size),
            "object_albedo": list(self.object_albedo),
            "texture_seed": self.texture_seed,
            "checker_cell": self.checker_cell,
            "checker_contrast": self.checker_contrast,
            "n_views": self.n_views,
            "ring_radius": self.ring_radius,
            "ring_height": self.ring_height,
            "ring_start_deg": self.ring_start_deg,
            "look_at": list(self.look_at),
            "width": self.width,
            "height": self.height,
            "focal": self.focal,
            "keypoints_per_surface": self.keypoints_per_surface,
        }
        return d

    @staticmethod
    def from_dict(d):
        return SceneSpec(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as f:
            return SceneSpec.from_dict(json.load(f))


def suggested_ray_bounds(spec: SceneSpec):
    """Near/far march range covering any in-room ray segment."""
    diag = float(np.linalg.norm(np.array(spec.room_max) - np.array(spec.room_min)))
    return 0.05, diag


def view_name(view: int):
    return f"view_{view:03d}.png"


def camera_for(spec: SceneSpec) -> CameraIntrinsics:
    return CameraIntrinsics(
        camera_id=1,
        model="PINHOLE",
        width=spec.width,
        height=spec.height,
        fx=spec.focal,
        fy=spec.focal,
        cx=(spec.width - 1) / 2.0,
        cy=(spec.height - 1) / 2.0,
    )


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose looking from position toward target.

    Camera axes: +x right, +y down, +z forward.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look-at target coincides with camera position")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_rotation(R, -R @ position)


def view_pose(spec: SceneSpec, view: int) -> Pose:
    if not 0 <= view < spec.n_views:
        raise ValueError(f"view {view} out of range for {spec.n_views}-view ring")
    return look_at_pose(spec.camera_positions()[view], spec.look_at)


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------


def _room_exit(spec, origin, dirs):
    """Exit distance and face (0..5 = axis*2+side) for rays leaving the room.

    Origins must lie strictly inside the room.
    """
    lo = np.array(spec.room_min)
    hi = np.array(spec.room_max)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t_exit = np.where(
        dirs > 0, (hi - origin) * inv, np.where(dirs < 0, (lo - origin) * inv, np.inf)
    )
    axis = np.argmin(t_exit, axis=1)
    rows = np.arange(dirs.shape[0])
    t = t_exit[rows, axis]
    side = (dirs[rows, axis] > 0).astype(np.int64)
    return t, axis * 2 + side


def _sphere_hit(center, radius, origin, dirs):
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _HIT_EPS, t0, np.where(t1 > _HIT_EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    return t, np.full(dirs.shape[0], 6, dtype=np.int64)


def _box_hit(center, half, origin, dirs):
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    # dirs == 0 with origin inside the slab must give (-inf, +inf)
    inside = (origin >= lo) & (origin <= hi)
    zero = dirs == 0
    t1 = np.where(zero, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(zero, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_enter <= t_exit) & (t_exit > _HIT_EPS)
    t = np.where(t_enter > _HIT_EPS, t_enter, t_exit)
    t = np.where(hit, t, np.inf)
    rows = np.arange(dirs.shape[0])
    axis = np.argmax(tmin, axis=1)
    side = (dirs[rows, axis] < 0).astype(np.int64)
    return t, 6 + axis * 2 + side


def trace_rays(spec: SceneSpec, origin, dirs, with_object=True):
    """First-hit distance, face id, and object-hit flag for a ray bundle.

    origin is shared (3,); dirs is (n, 3) and need not be unit length
    (distances are in units of |dirs| rows).
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_room, face_room = _room_exit(spec, origin, dirs)
    if not with_object:
        return t_room, face_room, np.zeros(dirs.shape[0], dtype=bool)
    if spec.object_kind == "sphere":
        t_obj, face_obj = _sphere_hit(
            np.array(spec.object_center), spec.object_size, origin, dirs
        )
    else:
        t_obj, face_obj = _box_hit(
            np.array(spec.object_center), np.array(spec.object_size), origin, dirs
        )
    hit_obj = t_obj < t_room
    t = np.where(hit_obj, t_obj, t_room)
    face = np.where(hit_obj, face_obj, face_room)
    return t, face, hit_obj


# ---------------------------------------------------------------------------
# Shading
# ---------------------------------------------------------------------------


def _wall_palette(spec):
    rng = np.random.default_rng(spec.texture_seed)
    return rng.uniform(0.35, 0.9, size=(6, 3))


def shade(spec: SceneSpec, points, faces):
    """Albedo at 3D surface points (n, 3): seeded per-face base color
    modulated by a 3D checker and a linear brightness ramp."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1)
    base = np.empty((points.shape[0], 3))
    wall = faces < 6
    base[wall] = _wall_palette(spec)[faces[wall]]
    base[~wall] = np.array(spec.object_albedo)

    parity = np.floor(points / spec.checker_cell).sum(axis=1) % 2
    checker = 1.0 - spec.checker_contrast + spec.checker_contrast * parity

    g = np.array([0.35, 0.2, 1.0])
    g /= np.linalg.norm(g)
    lo, hi = np.array(spec.room_min), np.array(spec.room_max)
    proj = points @ g
    corner_vals = [
        np.dot([x, y, z], g)
        for x in (lo[0], hi[0])
        for y in (lo[1], hi[1])
        for z in (lo[2], hi[2])
    ]
    p_lo, p_hi = min(corner_vals), max(corner_vals)
    ramp = np.clip((proj - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    bright = 0.85 + 0.15 * ramp
    return np.clip(base * (checker * bright)[:, None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_analytic(spec: SceneSpec, view: int, with_object=True):
    """Exact RGB and depth images for one ring view.

    Depth is the ray parameter of the first hit along the unit pixel ray.
    """
    cam = camera_for(spec)
    pose = view_pose(spec, view)
    origin, dirs = camera_ray_grid(cam, pose)
    t, face, _ = trace_rays(spec, origin, dirs, with_object)
    pts = origin + t[:, None] * dirs
    rgb = shade(spec, pts, face).reshape(spec.height, spec.width, 3)
    depth = t.reshape(spec.height, spec.width)
    return rgb, depth


def ground_truth_mask(spec: SceneSpec, view: int) -> Mask:
    """Pixels whose first hit is the object."""
    cam = camera_for(spec)
    pose = view_pose(spec, view)
    origin, dirs = camera_ray_grid(cam, pose)
    _, _, hit = trace_rays(spec, origin, dirs, with_object=True)
    return Mask(hit.reshape(spec.height, spec.width))


# ---------------------------------------------------------------------------
# Sparse model emission
# ---------------------------------------------------------------------------


def _sample_object_surface(spec, rng, count):
    c = np.array(spec.object_center)
    if spec.object_kind == "sphere":
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return c + spec.object_size * d
    half = np.array(spec.object_size)
    return _sample_box_faces(c - half, c + half, rng, count, _FACE_INSET)


def _sample_box_faces(lo, hi, rng, count, inset):
    """Uniform-by-area samples over the six faces of an axis-aligned box,
    inset from face edges by a fraction of each tangent extent."""
    ext = hi - lo
    areas = np.array(
        [ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[2],
         ext[0] * ext[1], ext[0] * ext[1]]
    )
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    pts = np.empty((count, 3))
    for i, f in enumerate(faces):
        axis, side = f // 2, f % 2
        pts[i, axis] = hi[axis] if side else lo[axis]
        for a in (ax for ax in range(3) if ax != axis):
            m = inset * ext[a]
            pts[i, a] = rng.uniform(lo[a] + m, hi[a] - m)
    return pts


def _dilated_object_mask(spec, view, margin_px):
    """Object mask grown by margin_px pixels (Chebyshev)."""
    m = ground_truth_mask(spec, view).bitmap
    r = int(np.ceil(margin_px))
    h, w = m.shape
    out = np.zeros_like(m)
    for dy in range(-r, r + 1):
        ys = slice(max(0, dy), min(h, h + dy))
        yt = slice(max(0, -dy), min(h, h - dy))
        for dx in range(-r, r + 1):
            xs = slice(max(0, dx), min(w, w + dx))
            xt = slice(max(0, -dx), min(w, w - dx))
            out[yt, xt] |= m[ys, xs]
    return out


def _silhouette_clear(spec, points, margin_px):
    """True for points that rasterize at least margin_px pixels away from
    the object silhouette in every view where they land in frame."""
    cam = camera_for(spec)
    keep = np.ones(points.shape[0], dtype=bool)
    for v in range(spec.n_views):
        pose = view_pose(spec, v)
        bad = _dilated_object_mask(spec, v, margin_px)
        uv, valid = project_points_to_pixels(cam, pose, points)
        px = np.clip(np.floor(uv[:, 0] + 0.5).astype(int), 0, cam.width - 1)
        py = np.clip(np.floor(uv[:, 1] + 0.5).astype(int), 0, cam.height - 1)
        keep &= ~(valid & bad[py, px])
    return keep


def _sample_walls(spec, rng, count):
    lo = np.array(spec.room_min)
    hi = np.array(spec.room_max)
    picked = []
    for _ in range(40):
        batch = _sample_box_faces(lo, hi, rng, 4 * count, _WALL_INSET)
        batch = batch[_silhouette_clear(spec, batch, _WALL_CLEAR_PX)]
        picked.append(batch)
        if sum(len(b) for b in picked) >= count:
            break
    pts = np.concatenate(picked)
    if pts.shape[0] < count:
        raise RuntimeError("could not sample enough wall points clear of the object")
    return pts[:count]


def emit_sparse_model(spec: SceneSpec, seed=0, untracked_per_view=15) -> SparseModel:
    """Sparse reconstruction from sampled surface points.

    Points are projected into every view with an analytic occlusion test;
    visible projections become keypoints sharing a 3D track. Points seen
    by fewer than two views are dropped, as a reconstruction would. Each
    view also gets a few track-free keypoints at random positions.
    """
    rng = np.random.default_rng(seed)
    k = spec.keypoints_per_surface
    obj_pts = _sample_object_surface(spec, rng, k)
    wall_pts = _sample_walls(spec, rng, k)
    pts = np.concatenate([obj_pts, wall_pts])
    n_pts = pts.shape[0]

    cam = camera_for(spec)
    poses = [view_pose(spec, v) for v in range(spec.n_views)]
    vis = np.zeros((spec.n_views, n_pts), dtype=bool)
    uvs = np.zeros((spec.n_views, n_pts, 2))
    for v, pose in enumerate(poses):
        cam_pos = pose.camera_center()
        delta = pts - cam_pos
        dist = np.linalg.norm(delta, axis=1)
        t_first, _, _ = trace_rays(spec, cam_pos, delta / dist[:, None])
        visible = np.abs(t_first - dist) <= 1e-6
        uv, in_frame = project_points_to_pixels(cam, pose, pts)
        vis[v] = visible & in_frame
        uvs[v] = uv

    track_len = vis.sum(axis=0)
    keep = track_len >= 2
    pts = pts[keep]
    vis = vis[:, keep]
    uvs = uvs[:, keep]

    # shade for stored point color; face recovered from nearest-surface test
    colors = np.empty((pts.shape[0], 3), dtype=np.uint8)
    for i, p in enumerate(pts):
        face = _face_of_point(spec, p)
        colors[i] = np.round(255.0 * shade(spec, p[None, :], [face])[0]).astype(np.uint8)

    points3d = {}
    images = {}
    kp_xys = {v: [] for v in range(spec.n_views)}
    kp_pids = {v: [] for v in range(spec.n_views)}
    tracks = {i: [] for i in range(pts.shape[0])}
    for v in range(spec.n_views):
        for i in np.flatnonzero(vis[v]):
            idx = len(kp_xys[v])
            kp_xys[v].append(uvs[v, i])
            kp_pids[v].append(i + 1)
            tracks[i].append((v + 1, idx))
    for i, p in enumerate(pts):
        points3d[i + 1] = Point3D(i + 1, p, colors[i], 0.0, tracks[i])
    for v in range(spec.n_views):
        extra = rng.uniform(
            [0.0, 0.0], [spec.width - 0.51, spec.height - 0.51],
            size=(untracked_per_view, 2),
        )
        xys = np.array(kp_xys[v] + list(extra)).reshape(-1, 2)
        pids = np.concatenate(
            [
                np.array(kp_pids[v], dtype=np.int64),
                np.full(untracked_per_view, NO_POINT3D, dtype=np.int64),
            ]
        )
        images[v + 1] = PosedImage(v + 1, view_name(v), 1, poses[v], xys, pids)

    model = SparseModel({1: camera_for(spec)}, images, points3d)
    model.validate()
    return model


def _face_of_point(spec, p):
    """Face id of the primitive surface the point lies on."""
    c = np.array(spec.object_center)
    if spec.object_kind == "sphere":
        if abs(np.linalg.norm(p - c) - spec.object_size) < 1e-6:
            return 6
    else:
        half = np.array(spec.object_size)
        rel = np.abs(np.abs(p - c) - half)
        if np.min(rel) < 1e-9 and np.all(np.abs(p - c) <= half + 1e-9):
            axis = int(np.argmin(rel))
            side = int(p[axis] > c[axis])
            return 6 + axis * 2 + side
    lo, hi = np.array(spec.room_min), np.array(spec.room_max)
    d_lo, d_hi = np.abs(p - lo), np.abs(p - hi)
    axis = int(np.argmin(np.minimum(d_lo, d_hi)))
    side = int(d_hi[axis] < d_lo[axis])
    return axis * 2 + side


# ---------------------------------------------------------------------------
# Oracles for the mask predictor and box detector interfaces
# ---------------------------------------------------------------------------


class OracleMaskPredictor:
    """Mask predictor backed by known true masks, keyed by image name.

    Returns the true mask when at least one prompt point lands inside
    it, otherwise an empty mask of the right dimensions.
    """

    def __init__(self, masks_by_name):
        self.masks_by_name = dict(masks_by_name)

    def predict(self, image, points) -> Mask:
        true_mask = self.masks_by_name[image.name]
        for x, y in points:
            if true_mask.contains_point(x, y):
                return true_mask
        return Mask.empty(true_mask.width, true_mask.height)


def oracle_mask_predictor(spec: SceneSpec) -> OracleMaskPredictor:
    return OracleMaskPredictor(
        {view_name(v): ground_truth_mask(spec, v) for v in range(spec.n_views)}
    )


class OracleBoxDetector:
    """Box detector returning the true mask's bounding box for any text."""

    def __init__(self, masks_by_name):
        self.masks_by_name = dict(masks_by_name)

    def detect(self, image, text):
        mask = self.masks_by_name[image.name]
        ys, xs = np.nonzero(mask.bitmap)
        if xs.size == 0:
            return None
        return (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def oracle_box_detector(spec: SceneSpec) -> OracleBoxDetector:
    return OracleBoxDetector(
        {view_name(v): ground_truth_mask(spec, v) for v in range(spec.n_views)}
    )


# ---------------------------------------------------------------------------
# Dataset emission
# ---------------------------------------------------------------------------


def write_dataset(spec: SceneSpec, out_dir, model_format="text", seed=0):
    """Write a complete dataset:

    images/  <name>             scene renders (object present)
    masks/   <name>.mask.png    true object masks
    depth/   <name>.depth.pfm   true scene depth (object present)
    priors/  <name>.inpaint.png true background color (object removed)
             <name>.depth.pfm   true background depth
    sparse/  cameras/images/points3D in the chosen format
    scene.json                  this spec plus suggested ray bounds
    """
    from .colmap_model import write_binary_model, write_text_model

    out = Path(out_dir)
    for sub in ("images", "masks", "depth", "priors", "sparse"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    for v in range(spec.n_views):
        name = view_name(v)
        rgb, depth = render_analytic(spec, v, with_object=True)
        bg_rgb, bg_depth = render_analytic(spec, v, with_object=False)
        imgio.save_image_png(rgb, out / "images" / name)
        save_mask_png(ground_truth_mask(spec, v), out / "masks" / mask_filename(name))
        imgio.write_pfm(depth, out / "depth" / imgio.depth_filename(name))
        imgio.save_image_png(bg_rgb, out / "priors" / imgio.inpaint_filename(name))
        imgio.write_pfm(bg_depth, out / "priors" / imgio.depth_filename(name))

    model = emit_sparse_model(spec, seed=seed)
    if model_format == "binary":
        write_binary_model(model, out / "sparse")
    else:
        write_text_model(model, out / "sparse")

    t_near, t_far = suggested_ray_bounds(spec)
    payload = {"spec": spec.to_dict(), "t_near": t_near, "t_far": t_far}
    with open(out / "scene.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    return out
