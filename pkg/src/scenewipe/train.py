"""Removal training: fit the voxel field to inpainted color priors,
depth priors, and masked perceptual patches.

Loss terms follow sum-of-squares conventions and are combined as
a*L_color + b*L_depth + c*L_perceptual. Depth supervision runs in one of
three modes: "dir" (no depth term), "dp" (depth only on mask-foreground
rays), "da" (depth on all rays). The perceptual term is a patch-moment
surrogate, not LPIPS: it matches channel means and covariances of
rendered vs prior patches sampled inside the mask.
"""

import csv
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .errors import DataError, EmptyMaskError, TrainingDivergedError
from .field import VoxelField, render_rays, render_rays_backward
from .geometry import camera_ray_grid
from .masks import Mask


class DepthMode(Enum):
    NONE = "dir"
    MASKED_ONLY = "dp"
    ALL = "da"

    @staticmethod
    def parse(value):
        if isinstance(value, DepthMode):
            return value
        for mode in DepthMode:
            if value == mode.value or value == mode.name:
                return mode
        raise ValueError(f"unknown depth mode {value!r} (use dir, dp, or da)")


@dataclass
class TrainConfig:
    a: float = 1.0
    b: float = 0.1
    c: float = 0.01
    depth_mode: DepthMode = DepthMode.ALL
    perceptual_on: bool = True
    ray_batch: int = 1024
    patch_size: int = 32
    patch_batch: int = 4
    n_samples: int = 64
    steps: int = 2000
    lr: float = 5e-2
    lr_final: object = None  # optional end-of-training rate, decayed to geometrically
    seed: int = 0
    t_near: float = 0.05
    t_far: float = 7.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.depth_mode = DepthMode.parse(self.depth_mode)
        for w in (self.a, self.b, self.c):
            if not np.isfinite(w) or w < 0:
                raise ValueError("loss weights must be finite and >= 0")
        if self.patch_size < 4:
            raise ValueError("patch_size must be >= 4")
        if self.ray_batch < 1 or self.n_samples < 1 or self.steps < 0:
            raise ValueError("ray_batch, n_samples >= 1 and steps >= 0 required")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("require 0 <= t_near < t_far")
        if self.lr_final is not None:
            self.lr_final = float(self.lr_final)
            if not 0 < self.lr_final <= self.lr:
                raise ValueError("lr_final must satisfy 0 < lr_final <= lr")

    def learning_rate(self, step):
        """Rate for one step: constant, or a geometric ramp to lr_final."""
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr * (self.lr_final / self.lr) ** frac

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["depth_mode"] = self.depth_mode.value
        return d

    @staticmethod
    def from_dict(d):
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)


@dataclass
class SupervisionSet:
    """Per-view training targets: prior color, prior depth, mask, camera."""

    view_ids: list
    cams: dict
    poses: dict
    colors: dict  # view_id -> (h, w, 3) float in [0, 1]
    depths: dict  # view_id -> (h, w) float
    masks: dict  # view_id -> Mask

    def validate(self):
        for vid in self.view_ids:
            cam = self.cams[vid]
            shape = (cam.height, cam.width)
            if self.colors[vid].shape != shape + (3,):
                raise DataError(f"view {vid}: color prior shape mismatch")
            if self.depths[vid].shape != shape:
                raise DataError(f"view {vid}: depth prior shape mismatch")
            if self.masks[vid].bitmap.shape != shape:
                raise DataError(f"view {vid}: mask shape mismatch")
            d = self.depths[vid]
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise DataError(f"view {vid}: depth prior must be finite and >= 0")
        return self


@dataclass
class PatchSample:
    """A square patch fully inside one view's image."""

    view_id: int
    u0: int
    v0: int
    s: int

    def flat_indices(self, width):
        ys, xs = np.mgrid[self.v0 : self.v0 + self.s, self.u0 : self.u0 + self.s]
        return (ys * width + xs).ravel()


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def color_loss(rendered, target):
    """Sum of squared color differences over the ray batch."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("color batch size mismatch")
    return float(np.sum((rendered - target) ** 2))


def depth_loss(rendered, target, mode, mask_bits=None):
    """Sum of squared depth differences under the selected mode."""
    mode = DepthMode.parse(mode)
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if rendered.shape != target.shape:
        raise ValueError("depth batch size mismatch")
    if mode is DepthMode.NONE:
        return 0.0
    sq = (rendered - target) ** 2
    if mode is DepthMode.ALL:
        return float(np.sum(sq))
    if mask_bits is None:
        raise ValueError("masked depth mode needs mask bits")
    mask_bits = np.asarray(mask_bits, dtype=bool).reshape(-1)
    if mask_bits.shape != rendered.shape:
        raise ValueError("mask bits size mismatch")
    return float(np.sum(sq[mask_bits]))


def _patch_moments(pixels):
    mu = pixels.mean(axis=0)
    centered = pixels - mu
    cov = centered.T @ centered / pixels.shape[0]
    return mu, centered, cov


def perceptual_patch_loss(rendered_patch, target_patch):
    """Channel-moment distance between two patches:
    |mu_P - mu_Q|^2 + |cov_P - cov_Q|_F^2."""
    p = np.asarray(rendered_patch, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target_patch, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("patch size mismatch")
    mu_p, _, cov_p = _patch_moments(p)
    mu_q, _, cov_q = _patch_moments(q)
    return float(np.sum((mu_p - mu_q) ** 2) + np.sum((cov_p - cov_q) ** 2))


def perceptual_patch_grad(rendered_patch, target_patch):
    """Loss and its gradient w.r.t. the rendered pixels (n, 3)."""
    p = np.asarray(rendered_patch, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target_patch, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("patch size mismatch")
    n = p.shape[0]
    mu_p, centered, cov_p = _patch_moments(p)
    mu_q, _, cov_q = _patch_moments(q)
    d_mu = mu_p - mu_q
    d_cov = cov_p - cov_q
    loss = float(np.sum(d_mu**2) + np.sum(d_cov**2))
    # mean-shift terms of the covariance gradient cancel (centered sums to 0)
    grad = (2.0 / n) * d_mu[None, :] + (4.0 / n) * centered @ d_cov
    return loss, grad


def sample_mask_patches(mask: Mask, s, count, rng, view_id=0):
    """Patches centered on uniformly drawn mask-foreground pixels, with the
    window shifted to stay inside the image."""
    ys, xs = np.nonzero(mask.bitmap)
    if xs.size == 0:
        raise EmptyMaskError("cannot sample patches from an empty mask")
    if s > mask.width or s > mask.height:
        raise ValueError(f"patch side {s} exceeds {mask.width}x{mask.height} image")
    picks = rng.integers(0, xs.size, size=count)
    out = []
    for i in picks:
        u0 = int(np.clip(xs[i] - s // 2, 0, mask.width - s))
        v0 = int(np.clip(ys[i] - s // 2, 0, mask.height - s))
        out.append(PatchSample(view_id, u0, v0, s))
    return out


def total_loss(parts, config: TrainConfig):
    lc, ld, lp = parts
    return config.a * lc + config.b * ld + config.c * lp


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter moment-based update applied to arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            self.params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _ray_pool(supervision: SupervisionSet):
    """Flatten every pixel of every view into one ray table."""
    origins, dirs, rgb, depth, bits, view_of = [], [], [], [], [], []
    for vi, vid in enumerate(supervision.view_ids):
        cam = supervision.cams[vid]
        origin, d = camera_ray_grid(cam, supervision.poses[vid])
        origins.append(origin)
        dirs.append(d)
        rgb.append(supervision.colors[vid].reshape(-1, 3))
        depth.append(supervision.depths[vid].reshape(-1))
        bits.append(supervision.masks[vid].bitmap.reshape(-1))
        view_of.append(np.full(d.shape[0], vi))
    return {
        "origins": np.stack(origins),
        "dirs": np.concatenate(dirs),
        "rgb": np.concatenate(rgb),
        "depth": np.concatenate(depth),
        "bits": np.concatenate(bits),
        "view_of": np.concatenate(view_of),
    }


def train_removal(field_in: VoxelField, supervision: SupervisionSet, config: TrainConfig):
    """Fit a copy of the field to the supervision; the input is untouched.

    Per step: ray_batch rays drawn uniformly over all pixels of all views
    drive the color and depth terms; patch_batch mask patches drive the
    perceptual term when enabled. Reported losses are per-ray / per-patch
    means, and the optimized objective matches what is reported. Returns
    (trained field, history) with one (step, L_c, L_d, L_p, total) row
    per step.
    """
    supervision.validate()
    trained = field_in.copy()
    rng = np.random.default_rng(config.seed)
    pool = _ray_pool(supervision)
    n_rays_total = pool["dirs"].shape[0]
    opt = Adam(
        {"density": trained.density, "color": trained.color},
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    )

    patch_views = [
        vid for vid in supervision.view_ids if supervision.masks[vid].foreground_count()
    ]
    if config.perceptual_on and config.c > 0 and not patch_views:
        raise DataError("perceptual loss enabled but no view has mask foreground")
    view_grids = {}
    if config.perceptual_on and config.c > 0:
        for vid in patch_views:
            origin, d = camera_ray_grid(supervision.cams[vid], supervision.poses[vid])
            view_grids[vid] = (origin, d)

    history = []
    br = config.ray_batch
    for step in range(config.steps):
        idx = rng.integers(0, n_rays_total, size=br)
        jitter = rng.random((br, config.n_samples))
        res = render_rays(
            trained,
            pool["origins"][pool["view_of"][idx]],
            pool["dirs"][idx],
            config.t_near,
            config.t_far,
            config.n_samples,
            jitter,
        )
        diff_c = res.color - pool["rgb"][idx]
        l_c = float(np.sum(diff_c**2)) / br
        d_color = (2.0 * config.a / br) * diff_c

        l_d = 0.0
        d_depth = None
        if config.depth_mode is not DepthMode.NONE and config.b > 0:
            sel = (
                pool["bits"][idx]
                if config.depth_mode is DepthMode.MASKED_ONLY
                else np.ones(br, dtype=bool)
            )
            diff_d = (res.depth - pool["depth"][idx]) * sel
            l_d = float(np.sum(diff_d**2)) / br
            d_depth = (2.0 * config.b / br) * diff_d

        gd, gc = render_rays_backward(trained, res, d_color, d_depth)

        l_p = 0.0
        if config.perceptual_on and config.c > 0:
            patches = []
            for _ in range(config.patch_batch):
                vid = patch_views[int(rng.integers(0, len(patch_views)))]
                patches.extend(
                    sample_mask_patches(
                        supervision.masks[vid], config.patch_size, 1, rng, vid
                    )
                )
            s2 = config.patch_size**2
            p_origins = np.empty((len(patches) * s2, 3))
            p_dirs = np.empty((len(patches) * s2, 3))
            p_targets = np.empty((len(patches) * s2, 3))
            for i, patch in enumerate(patches):
                cam = supervision.cams[patch.view_id]
                flat = patch.flat_indices(cam.width)
                origin, d = view_grids[patch.view_id]
                sl = slice(i * s2, (i + 1) * s2)
                p_origins[sl] = origin
                p_dirs[sl] = d[flat]
                p_targets[sl] = supervision.colors[patch.view_id].reshape(-1, 3)[flat]
            p_jitter = rng.random((p_dirs.shape[0], config.n_samples))
            p_res = render_rays(
                trained,
                p_origins,
                p_dirs,
                config.t_near,
                config.t_far,
                config.n_samples,
                p_jitter,
            )
            d_color_p = np.empty_like(p_res.color)
            for i in range(len(patches)):
                sl = slice(i * s2, (i + 1) * s2)
                loss_i, grad_i = perceptual_patch_grad(
                    p_res.color[sl], p_targets[sl]
                )
                l_p += loss_i
                d_color_p[sl] = grad_i
            l_p /= len(patches)
            d_color_p *= config.c / len(patches)
            gd_p, gc_p = render_rays_backward(trained, p_res, d_color_p)
            gd += gd_p
            gc += gc_p

        total = total_loss((l_c, l_d, l_p), config)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                step, f"loss is not finite (L_c={l_c}, L_d={l_d}, L_p={l_p})"
            )
        history.append((step, l_c, l_d, l_p, total))
        opt.lr = config.learning_rate(step)
        opt.step({"density": gd, "color": gc})

    return trained, history


def save_loss_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "L_c", "L_d", "L_p", "total"])
        for row in history:
            writer.writerow([row[0], *[f"{v:.10g}" for v in row[1:]]])


def load_loss_history(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["step", "L_c", "L_d", "L_p", "total"]:
            raise DataError(f"unexpected loss history header in {path}")
        return [
            (int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in reader
        ]
