"""Point-prompt propagation across views and mask prediction plumbing.

A user annotates one view with a few points. Keypoints of that view
inside the predicted mask are lifted to their 3D tracks, reprojected
into every other view, and each user point is carried over by snapping
to sparse correspondences. A pluggable mask predictor (oracle or an
external process) turns the per-view points into masks.
"""

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .colmap_model import SparseModel, masked_keypoints
from .errors import (
    DataError,
    EmptyMaskError,
    ExternalToolError,
    NoDetectionError,
    NoSparseCorrespondenceError,
)
from .geometry import project_points_to_pixels, rasterize
from .masks import Mask, load_mask_png


@dataclass
class ViewImage:
    """Lightweight handle to one view's image."""

    view_id: int
    name: str
    width: int
    height: int
    path: object = None  # filesystem path when the pixels live on disk


@dataclass
class PointPrompt:
    """Point annotations on a single view, pixel coordinates."""

    view_id: int
    points: list

    def __post_init__(self):
        self.points = [(float(x), float(y)) for x, y in self.points]

    def __len__(self):
        return len(self.points)


@dataclass
class PromptSet:
    """Per-view propagated prompts plus propagation diagnostics.

    prompts maps view_id -> PointPrompt in model view order; dropped
    maps view_id -> reason for views that received zero points; notes
    carries non-fatal observations (point-count shortfall and the like).
    """

    prompts: dict
    m: int
    source: str = "points"
    names: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def view_ids(self):
        return list(self.prompts)

    def total_points(self):
        return sum(len(p) for p in self.prompts.values())

    def __eq__(self, other):
        if not isinstance(other, PromptSet):
            return NotImplemented
        return (
            self.m == other.m
            and self.source == other.source
            and {v: p.points for v, p in self.prompts.items()}
            == {v: p.points for v, p in other.prompts.items()}
        )


@dataclass
class MaskStack:
    """Per-view masks plus per-view failure reasons and warnings."""

    masks: dict
    failures: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)


class MaskPredictor(Protocol):
    def predict(self, image: ViewImage, points) -> Mask: ...


class BoxDetector(Protocol):
    def detect(self, image: ViewImage, text: str): ...


def nearest_keypoints(candidates, query, k):
    """Indices of the k candidates closest to query (Euclidean, stable ties).

    Returns all candidates when k exceeds their number.
    """
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    if candidates.shape[0] == 0:
        raise ValueError("empty candidate list")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = np.linalg.norm(candidates - np.asarray(query, dtype=np.float64), axis=1)
    order = np.argsort(d, kind="stable")
    return order[: min(k, candidates.shape[0])]


def _dedup(seq):
    seen = set()
    out = []
    for item in seq:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def propagate_points(
    model: SparseModel, initial: PointPrompt, initial_mask: Mask
) -> PromptSet:
    """Carry a single-view point prompt to every registered view.

    Stage 1 lifts the annotated view's in-mask keypoints to their 3D
    points and projects them into each view (the per-view cloud).
    Stage 2 snaps each user point to its nearest in-mask keypoint (the
    anchors) and, per view, selects the cloud points nearest the
    projected anchors, merging the per-anchor distance orderings
    round-robin, deduplicating, and truncating to the user point count.
    """
    if len(initial.points) == 0:
        raise DataError("initial prompt has no points")
    if initial.view_id not in model.images:
        raise DataError(f"annotated view {initial.view_id} not in model")

    anchored = masked_keypoints(model, initial.view_id, initial_mask)
    if not anchored:
        raise NoSparseCorrespondenceError(
            "no keypoints with 3D tracks under the mask of view "
            f"{initial.view_id}"
        )
    kp_xy = np.array([xy for xy, _ in anchored])
    p3d = np.array([model.points[pid].xyz for _, pid in anchored])
    l, m = len(anchored), len(initial.points)

    anchor_idx = _dedup(
        int(nearest_keypoints(kp_xy, q, 1)[0]) for q in initial.points
    )

    out = PromptSet(prompts={}, m=m, source="points")
    if m > l:
        out.notes.append(
            f"prompt has {m} points but only {l} masked keypoints are available"
        )

    for view_id in model.view_order:
        img = model.images[view_id]
        cam = model.cameras[img.camera_id]
        out.names[view_id] = img.name
        uv, valid = project_points_to_pixels(cam, img.pose, p3d)
        cloud = np.flatnonzero(valid)
        visible_anchors = [a for a in anchor_idx if valid[a]]
        if cloud.size == 0 or not visible_anchors:
            reason = (
                "no cloud points project into the view"
                if cloud.size == 0
                else "no anchor points project into the view"
            )
            out.prompts[view_id] = PointPrompt(view_id, [])
            out.dropped[view_id] = reason
            continue
        orderings = []
        for a in visible_anchors:
            d = np.linalg.norm(uv[cloud] - uv[a], axis=1)
            orderings.append(cloud[np.argsort(d, kind="stable")])
        chosen = []
        seen = set()
        for rank in range(cloud.size):
            for order in orderings:
                j = int(order[rank])
                if j not in seen:
                    seen.add(j)
                    chosen.append(j)
                    if len(chosen) == m:
                        break
            if len(chosen) == m:
                break
        pts = [(float(uv[j, 0]), float(uv[j, 1])) for j in chosen]
        out.prompts[view_id] = PointPrompt(view_id, pts)
    return out


def sample_points_from_mask(mask: Mask, view_id=0) -> PointPrompt:
    """Three representative points of a mask: first and last foreground
    pixels in row-major order, and the foreground pixel nearest the
    foreground centroid. Duplicates collapse, so fewer points can result.
    """
    ys, xs = np.nonzero(mask.bitmap)
    if xs.size == 0:
        raise EmptyMaskError("cannot sample points from an empty mask")
    first = (float(xs[0]), float(ys[0]))
    last = (float(xs[-1]), float(ys[-1]))
    cx, cy = xs.mean(), ys.mean()
    near = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
    center = (float(xs[near]), float(ys[near]))
    return PointPrompt(view_id, _dedup([first, last, center]))


def predict_masks(predictor, images, prompts: PromptSet) -> MaskStack:
    """Run the mask predictor per prompted view, collecting failures.

    Views with zero propagated points get an empty mask and a failure
    note. Wrong-dimensioned predictor output is a per-view failure, not
    a fatal error. Prompt points that are not foreground in the returned
    mask are recorded as warnings.
    """
    stack = MaskStack(masks={})
    for view_id, prompt in prompts.prompts.items():
        image = images[view_id]
        empty = Mask.empty(image.width, image.height)
        if len(prompt) == 0:
            stack.masks[view_id] = empty
            stack.failures[view_id] = "no propagated points"
            continue
        try:
            mask = predictor.predict(image, prompt.points)
        except ExternalToolError as e:
            stack.masks[view_id] = empty
            stack.failures[view_id] = str(e)
            continue
        if (mask.width, mask.height) != (image.width, image.height):
            stack.masks[view_id] = empty
            stack.failures[view_id] = (
                f"predictor returned {mask.width}x{mask.height} mask for "
                f"{image.width}x{image.height} view"
            )
            continue
        missing = [
            (x, y) for x, y in prompt.points if not mask.contains_point(x, y)
        ]
        if missing:
            stack.warnings[view_id] = (
                f"{len(missing)} prompt point(s) not foreground in predicted mask"
            )
        stack.masks[view_id] = mask
    return stack


def box_to_mask(box, width, height) -> Mask:
    """Axis-aligned box (x0, y0, x1, y1) to a filled rectangular mask."""
    x0, y0, x1, y1 = box
    ix0 = max(rasterize(min(x0, x1)), 0)
    iy0 = max(rasterize(min(y0, y1)), 0)
    ix1 = min(rasterize(max(x0, x1)), width - 1)
    iy1 = min(rasterize(max(y0, y1)), height - 1)
    bitmap = np.zeros((height, width), dtype=bool)
    if ix0 <= ix1 and iy0 <= iy1:
        bitmap[iy0 : iy1 + 1, ix0 : ix1 + 1] = True
    return Mask(bitmap)


def run_text_prompt(
    model: SparseModel, images, detector, predictor, text, view_id=None
):
    """Text-driven entry: detect a box on the annotated view, segment it,
    seed points from the mask, then propagate as in the points path.

    Returns (PromptSet, initial Mask). The annotated view defaults to the
    first view in model order.
    """
    if view_id is None:
        view_id = model.view_order[0]
    image = images[view_id]
    box = detector.detect(image, text)
    if box is None:
        raise NoDetectionError(f"detector found no box for {text!r}")
    seed_prompt = sample_points_from_mask(
        box_to_mask(box, image.width, image.height), view_id
    )
    initial_mask = predictor.predict(image, seed_prompt.points)
    initial = sample_points_from_mask(initial_mask, view_id)
    result = propagate_points(model, initial, initial_mask)
    result.source = "text"
    return result, initial_mask


# ---------------------------------------------------------------------------
# External child-process adapters
# ---------------------------------------------------------------------------


def _run_tool(argv, what):
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=300)
    except OSError as e:
        raise ExternalToolError(f"{what} failed to start: {e}") from None
    except subprocess.TimeoutExpired:
        raise ExternalToolError(f"{what} timed out") from None
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-3:]
        raise ExternalToolError(
            f"{what} exited with {proc.returncode}: {' / '.join(tail) or 'no stderr'}"
        )


class ExecMaskPredictor:
    """Mask predictor backed by a child process.

    Invocation: CMD <image_path> <prompt_json_path> <out_mask_path>.
    The prompt file holds {"points": [{"x":..., "y":...}, ...]}; the tool
    must write an 8-bit mask PNG (0 background, 255 foreground) and exit 0.
    """

    def __init__(self, command):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)

    def predict(self, image: ViewImage, points) -> Mask:
        if image.path is None:
            raise ExternalToolError(
                f"view {image.view_id} has no image file for the external predictor"
            )
        with tempfile.TemporaryDirectory(prefix="scenewipe-seg-") as tmp:
            prompt_path = Path(tmp) / "prompt.json"
            out_path = Path(tmp) / "mask.png"
            with open(prompt_path, "w", encoding="utf-8") as f:
                json.dump({"points": [{"x": x, "y": y} for x, y in points]}, f)
            _run_tool(
                [*self.argv, str(image.path), str(prompt_path), str(out_path)],
                "mask predictor",
            )
            if not out_path.is_file():
                raise ExternalToolError("mask predictor wrote no output mask")
            return load_mask_png(out_path)


class ExecBoxDetector:
    """Text-to-box detector backed by a child process.

    Invocation: CMD <image_path> <request_json_path> <out_json_path>.
    The request holds {"text": ...}; the tool writes {"box": [x0, y0, x1, y1]}
    or {"box": null} and exits 0.
    """

    def __init__(self, command):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)

    def detect(self, image: ViewImage, text):
        if image.path is None:
            raise ExternalToolError(
                f"view {image.view_id} has no image file for the external detector"
            )
        with tempfile.TemporaryDirectory(prefix="scenewipe-det-") as tmp:
            req_path = Path(tmp) / "request.json"
            out_path = Path(tmp) / "response.json"
            with open(req_path, "w", encoding="utf-8") as f:
                json.dump({"text": text}, f)
            _run_tool(
                [*self.argv, str(image.path), str(req_path), str(out_path)],
                "box detector",
            )
            try:
                with open(out_path, encoding="utf-8") as f:
                    payload = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ExternalToolError(f"box detector output unreadable: {e}") from None
            box = payload.get("box")
            if box is None:
                return None
            if len(box) != 4:
                raise ExternalToolError(f"box detector returned malformed box {box!r}")
            return tuple(float(v) for v in box)


# ---------------------------------------------------------------------------
# Prompt file round trip
# ---------------------------------------------------------------------------


def save_prompts(prompts: PromptSet, path):
    payload = {
        "views": [
            {
                "view_id": view_id,
                "name": prompts.names.get(view_id, ""),
                "points": [{"x": x, "y": y} for x, y in prompt.points],
            }
            for view_id, prompt in prompts.prompts.items()
        ],
        "m": prompts.m,
        "source": prompts.source,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_prompts(path) -> PromptSet:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        views = payload["views"]
        out = PromptSet(prompts={}, m=int(payload["m"]), source=payload["source"])
        for entry in views:
            view_id = int(entry["view_id"])
            pts = [(float(p["x"]), float(p["y"])) for p in entry["points"]]
            out.prompts[view_id] = PointPrompt(view_id, pts)
            out.names[view_id] = entry.get("name", "")
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"unreadable prompt file {path}: {e}") from None
    if out.source not in ("points", "text"):
        raise DataError(f"malformed prompt file {path}: bad source {out.source!r}")
    return out
