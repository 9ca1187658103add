"""Dataset directory loading shared by the CLI and the annotation service.

A dataset root contains images/, sparse/ (text or binary model), and
optionally masks/, priors/, depth/, scene.json as written by the scene
generator. A bare sparse-model directory is also accepted.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .colmap_model import SparseModel, parse_model
from .errors import DataError
from .masks import load_mask_png, mask_filename
from .propagation import ExecBoxDetector, ExecMaskPredictor, ViewImage
from .synthetic import OracleBoxDetector, OracleMaskPredictor
from .train import SupervisionSet


@dataclass
class Dataset:
    root: Path
    model: SparseModel
    images: dict  # view_id -> ViewImage
    scene: dict = None  # parsed scene.json payload when present

    def view_ids(self):
        return self.model.view_order

    def ray_bounds(self, default_near=0.05):
        """Near/far march range: scene.json values when available, else a
        span derived from the model point cloud."""
        if self.scene and "t_near" in self.scene and "t_far" in self.scene:
            return float(self.scene["t_near"]), float(self.scene["t_far"])
        pts = [p.xyz for p in self.model.points.values()]
        if not pts:
            raise DataError("no scene.json and no 3D points to derive ray bounds from")
        arr = np.array(pts)
        span = float(np.linalg.norm(arr.max(axis=0) - arr.min(axis=0)))
        return default_near, 2.0 * span

    def field_bounds(self):
        if self.scene:
            spec = self.scene.get("spec", {})
            if "room_min" in spec and "room_max" in spec:
                return spec["room_min"], spec["room_max"]
        pts = [p.xyz for p in self.model.points.values()]
        if not pts:
            raise DataError("no scene.json and no 3D points to derive field bounds from")
        arr = np.array(pts)
        margin = 0.05 * (arr.max(axis=0) - arr.min(axis=0))
        return (arr.min(axis=0) - margin).tolist(), (arr.max(axis=0) + margin).tolist()


def _sparse_dir(root: Path):
    if (root / "cameras.txt").is_file() or (root / "cameras.bin").is_file():
        return root
    if (root / "sparse").is_dir():
        return root / "sparse"
    raise DataError(f"{root}: no sparse model found (looked for cameras.* and sparse/)")


def load_dataset(root, model_format="auto") -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    sparse = _sparse_dir(root)
    model = parse_model(sparse, model_format)
    if sparse == root:
        root = root.parent if (root.parent / "images").is_dir() else root

    images = {}
    for view_id in model.view_order:
        img = model.images[view_id]
        cam = model.cameras[img.camera_id]
        path = root / "images" / img.name
        images[view_id] = ViewImage(
            view_id, img.name, cam.width, cam.height, path if path.is_file() else None
        )

    scene = None
    scene_path = root / "scene.json"
    if scene_path.is_file():
        try:
            with open(scene_path, encoding="utf-8") as f:
                scene = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"unreadable scene.json: {e}") from None
    return Dataset(root, model, images, scene)


def load_mask_dir(dataset: Dataset, masks_dir) -> dict:
    """Per-view masks from a directory of <image_name>.mask.png files."""
    masks_dir = Path(masks_dir)
    out = {}
    for view_id in dataset.view_ids():
        name = dataset.images[view_id].name
        path = masks_dir / mask_filename(name)
        if not path.is_file():
            raise DataError(f"missing mask file {path}")
        mask = load_mask_png(path)
        cam_w = dataset.images[view_id].width
        cam_h = dataset.images[view_id].height
        if (mask.width, mask.height) != (cam_w, cam_h):
            raise DataError(
                f"{path}: mask is {mask.width}x{mask.height}, view is {cam_w}x{cam_h}"
            )
        out[view_id] = mask
    return out


def make_mask_predictor(spec_arg, dataset: Dataset = None, masks_dir=None):
    """Predictor from a CLI-style spec: "oracle" or "exec:<command>"."""
    if spec_arg == "oracle":
        if dataset is None:
            raise DataError("oracle mask predictor needs a dataset")
        masks_dir = Path(masks_dir) if masks_dir else dataset.root / "masks"
        if not masks_dir.is_dir():
            raise DataError(
                f"oracle mask predictor needs true masks in {masks_dir}"
            )
        masks = load_mask_dir(dataset, masks_dir)
        return OracleMaskPredictor(
            {dataset.images[v].name: m for v, m in masks.items()}
        )
    if spec_arg.startswith("exec:"):
        command = spec_arg[len("exec:") :]
        if not command.strip():
            raise DataError("empty exec predictor command")
        return ExecMaskPredictor(command)
    raise DataError(f"unknown mask predictor {spec_arg!r} (use oracle or exec:CMD)")


def make_box_detector(spec_arg, dataset: Dataset = None, masks_dir=None):
    """Detector from a CLI-style spec: "oracle" or "exec:<command>"."""
    if spec_arg == "oracle":
        if dataset is None:
            raise DataError("oracle box detector needs a dataset")
        masks_dir = Path(masks_dir) if masks_dir else dataset.root / "masks"
        if not masks_dir.is_dir():
            raise DataError(f"oracle box detector needs true masks in {masks_dir}")
        masks = load_mask_dir(dataset, masks_dir)
        return OracleBoxDetector(
            {dataset.images[v].name: m for v, m in masks.items()}
        )
    if spec_arg.startswith("exec:"):
        command = spec_arg[len("exec:") :]
        if not command.strip():
            raise DataError("empty exec detector command")
        return ExecBoxDetector(command)
    raise DataError(f"unknown box detector {spec_arg!r} (use oracle or exec:CMD)")


def build_supervision(
    dataset: Dataset, priors_dir=None, masks_dir=None, exclude=()
) -> SupervisionSet:
    """Assemble training targets from prior and mask directories.

    priors_dir must hold <name>.inpaint.png and <name>.depth.pfm per view;
    masks_dir holds <name>.mask.png. Views listed in exclude are left out
    (held-out evaluation views).
    """
    priors_dir = Path(priors_dir) if priors_dir else dataset.root / "priors"
    masks_dir = Path(masks_dir) if masks_dir else dataset.root / "masks"
    exclude = set(exclude)

    view_ids = [v for v in dataset.view_ids() if v not in exclude]
    if not view_ids:
        raise DataError("no views left to train on after exclusions")
    masks = load_mask_dir(dataset, masks_dir)
    cams, poses, colors, depths, sel_masks = {}, {}, {}, {}, {}
    for vid in view_ids:
        img = dataset.model.images[vid]
        cams[vid] = dataset.model.cameras[img.camera_id]
        poses[vid] = img.pose
        color_path = priors_dir / imgio.inpaint_filename(img.name)
        depth_path = priors_dir / imgio.depth_filename(img.name)
        if not color_path.is_file():
            raise DataError(f"missing color prior {color_path}")
        if not depth_path.is_file():
            raise DataError(f"missing depth prior {depth_path}")
        colors[vid] = imgio.load_image_png(color_path)
        depths[vid] = imgio.read_pfm(depth_path)
        sel_masks[vid] = masks[vid]
    return SupervisionSet(view_ids, cams, poses, colors, depths, sel_masks).validate()
