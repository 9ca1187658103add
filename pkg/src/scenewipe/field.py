"""Lambertian voxel radiance field with differentiable volume rendering.

The field stores pre-activation density and color on a regular vertex
grid over an axis-aligned box; density goes through a softplus, color
through a sigmoid, both applied after trilinear interpolation. Rendering
integrates stratified samples front to back:

    alpha_k = 1 - exp(-sigma_k * delta_k)
    T_k     = exp(-sum_{j<k} sigma_j * delta_j)
    color   = sum T_k alpha_k c_k        depth = sum T_k alpha_k t_k

The backward pass is analytic and division-free: the suffix influence of
alpha_k is accumulated with the recurrence R_k = a_{k+1} g_{k+1} +
(1 - a_{k+1}) R_{k+1}, which stays finite as alpha -> 1.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"ORNF"
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Pre-activation giving softplus(x) = y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class VoxelField:
    """Vertex grids of pre-activation density and color over a box.

    Parameters live in one contiguous (nx, ny, nz, 4) array so a sample
    fetch touches memory once; density and color are writable views into
    it (channel 0 and channels 1:4).
    """

    def __init__(self, density, color, lo, hi):
        density = np.asarray(density, dtype=np.float64)
        color = np.asarray(color, dtype=np.float64)
        if density.ndim != 3 or min(density.shape) < 2:
            raise ValueError("density grid must be (nx, ny, nz) with every axis >= 2")
        if color.shape != density.shape + (3,):
            raise ValueError("color grid must be (nx, ny, nz, 3)")
        self.params = np.empty(density.shape + (4,))
        self.params[..., 0] = density
        self.params[..., 1:] = color
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3).copy()
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3).copy()
        if not np.all(self.lo < self.hi):
            raise ValueError("field bounds inverted")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("field parameters must be finite")

    @property
    def density(self):
        return self.params[..., 0]

    @property
    def color(self):
        return self.params[..., 1:]

    @property
    def resolution(self):
        return self.params.shape[:3]

    @staticmethod
    def create(resolution, lo, hi, density_init=-6.0, color_init=0.0):
        nx, ny, nz = resolution
        return VoxelField(
            np.full((nx, ny, nz), float(density_init)),
            np.full((nx, ny, nz, 3), float(color_init)),
            lo,
            hi,
        )

    def copy(self):
        out = VoxelField.__new__(VoxelField)
        out.params = self.params.copy()
        out.lo = self.lo.copy()
        out.hi = self.hi.copy()
        return out


def _corner_weights(field: VoxelField, pos):
    """Trilinear support of query points.

    Returns (inside, flat_idx (M, 8), weights (M, 8)); rows outside the
    bounds have zero weights and index 0.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = field.resolution
    res1 = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    g = (pos - field.lo) * (res1 / (field.hi - field.lo))
    inside = np.all((pos >= field.lo) & (pos <= field.hi), axis=1)
    np.clip(g, 0.0, res1, out=g)
    i0 = np.minimum(g.astype(np.int64), [nx - 2, ny - 2, nz - 2])
    f = g - i0
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    ex, ey, ez = 1.0 - fx, 1.0 - fy, 1.0 - fz
    m = pos.shape[0]
    w = np.empty((m, 8))
    # corner order: bit 2 = +x, bit 1 = +y, bit 0 = +z
    w[:, 0] = ex * ey * ez
    w[:, 1] = ex * ey * fz
    w[:, 2] = ex * fy * ez
    w[:, 3] = ex * fy * fz
    w[:, 4] = fx * ey * ez
    w[:, 5] = fx * ey * fz
    w[:, 6] = fx * fy * ez
    w[:, 7] = fx * fy * fz
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offsets = np.array(
        [0, 1, nz, nz + 1, ny * nz, ny * nz + 1, ny * nz + nz, ny * nz + nz + 1]
    )
    idx = base[:, None] + offsets
    if not inside.all():
        w[~inside] = 0.0
    return inside, idx, w


def sample_field(field: VoxelField, pos, with_cache=False):
    """Density and color at world points (M, 3); zero outside the bounds."""
    inside, idx, w = _corner_weights(field, pos)
    raw = np.einsum("mc,mcd->md", w, field.params.reshape(-1, 4)[idx])
    sigma = softplus(raw[:, 0])
    rgb = sigmoid(raw[:, 1:])
    if not inside.all():
        out = ~inside
        sigma[out] = 0.0
        rgb[out] = 0.0
    if with_cache:
        return sigma, rgb, (inside, idx, w)
    return sigma, rgb


@dataclass
class RenderResult:
    """Per-ray render outputs plus the sample cache for the backward pass."""

    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    trans_residual: np.ndarray  # (R,) transmittance past t_far
    cache: dict


def stratified_ts(t_near, t_far, n_samples, n_rays, jitter=0.5):
    """Sample positions along [t_near, t_far) and the inter-sample deltas.

    jitter is a scalar in [0, 1) or an (n_rays, n_samples) array of bin
    offsets; 0.5 gives deterministic midpoints. The last delta runs to
    t_far, so the deltas sum exactly to the ray segment minus the first
    offset.
    """
    if not 0.0 <= t_near < t_far:
        raise ValueError("ray bounds must satisfy 0 <= t_near < t_far")
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    step = (t_far - t_near) / n_samples
    base = t_near + step * np.arange(n_samples)
    u = np.asarray(jitter, dtype=np.float64)
    if u.ndim == 0:
        t = np.broadcast_to(base + step * float(u), (n_rays, n_samples)).copy()
    else:
        if u.shape != (n_rays, n_samples):
            raise ValueError("jitter array must be (n_rays, n_samples)")
        t = base[None, :] + step * u
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def render_rays(
    field: VoxelField,
    origins,
    dirs,
    t_near,
    t_far,
    n_samples,
    jitter=0.5,
) -> RenderResult:
    """Volume-render a batch of rays with unit directions."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = dirs.shape[0]
    t, delta = stratified_ts(t_near, t_far, n_samples, n_rays, jitter)
    pos = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    sigma, rgb, (inside, idx, w) = sample_field(
        field, pos.reshape(-1, 3), with_cache=True
    )
    sigma = sigma.reshape(n_rays, n_samples)
    rgb = rgb.reshape(n_rays, n_samples, 3)
    s = sigma * delta
    csum = np.cumsum(s, axis=1)
    trans = np.exp(-(csum - s))  # T_k, exclusive prefix
    alpha = -np.expm1(-s)
    weight = trans * alpha
    color = (weight[:, :, None] * rgb).sum(axis=1)
    depth = (weight * t).sum(axis=1)
    residual = np.exp(-csum[:, -1])
    cache = {
        "t": t,
        "delta": delta,
        "alpha": alpha,
        "trans": trans,
        "weight": weight,
        "sigma": sigma,
        "rgb": rgb,
        "inside": inside,
        "idx": idx,
        "w": w,
    }
    return RenderResult(color, depth, residual, cache)


def render_rays_backward(field: VoxelField, result: RenderResult, d_color, d_depth=None):
    """Gradients of sum(d_color * color) + sum(d_depth * depth) w.r.t. the
    pre-activation grids. Returns (grad_density, grad_color)."""
    c = result.cache
    t, delta = c["t"], c["delta"]
    alpha, trans, weight = c["alpha"], c["trans"], c["weight"]
    rgb, sigma = c["rgb"], c["sigma"]
    n_rays, n_samples = alpha.shape
    d_color = np.asarray(d_color, dtype=np.float64).reshape(n_rays, 3)

    g = (d_color[:, None, :] * rgb).sum(axis=2)
    if d_depth is not None:
        g = g + np.asarray(d_depth, dtype=np.float64).reshape(n_rays, 1) * t

    r = np.zeros((n_rays, n_samples))
    for k in range(n_samples - 2, -1, -1):
        r[:, k] = alpha[:, k + 1] * g[:, k + 1] + (1.0 - alpha[:, k + 1]) * r[:, k + 1]
    d_alpha = trans * (g - r)
    d_sigma = d_alpha * delta * (1.0 - alpha)
    # softplus'(raw) = sigmoid(raw) = 1 - exp(-softplus(raw))
    d_sigma_raw = d_sigma * (-np.expm1(-sigma))
    d_rgb = weight[:, :, None] * d_color[:, None, :]
    d_color_raw = d_rgb * rgb * (1.0 - rgb)

    idx, w = c["idx"], c["w"]
    n_vox = int(np.prod(field.resolution))
    flat_idx = idx.ravel()
    contrib_d = (w * d_sigma_raw.reshape(-1, 1)).ravel()
    grad_density = np.bincount(flat_idx, weights=contrib_d, minlength=n_vox).reshape(
        field.resolution
    )
    d_c_flat = d_color_raw.reshape(-1, 3)
    grad_color = np.empty(field.resolution + (3,))
    for ch in range(3):
        contrib_c = (w * d_c_flat[:, ch : ch + 1]).ravel()
        grad_color[..., ch] = np.bincount(
            flat_idx, weights=contrib_c, minlength=n_vox
        ).reshape(field.resolution)
    return grad_density, grad_color


def render_image(
    field: VoxelField,
    cam,
    pose,
    t_near,
    t_far,
    n_samples,
    jitter=0.5,
    chunk=8192,
):
    """Render full color/depth/transmittance images for one camera."""
    from .geometry import camera_ray_grid

    origin, dirs = camera_ray_grid(cam, pose)
    n = dirs.shape[0]
    color = np.empty((n, 3))
    depth = np.empty(n)
    resid = np.empty(n)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        res = render_rays(
            field,
            np.broadcast_to(origin, (sl.stop - sl.start, 3)),
            dirs[sl],
            t_near,
            t_far,
            n_samples,
            jitter,
        )
        color[sl], depth[sl], resid[sl] = res.color, res.depth, res.trans_residual
    h, w = cam.height, cam.width
    return color.reshape(h, w, 3), depth.reshape(h, w), resid.reshape(h, w)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(field: VoxelField, path):
    """Versioned little-endian binary: header, then f32 grids x-fastest."""
    nx, ny, nz = field.resolution
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<III", nx, ny, nz))
        f.write(struct.pack("<6d", *field.lo, *field.hi))
        f.write(field.density.transpose(2, 1, 0).ravel().astype("<f4").tobytes())
        f.write(field.color.transpose(2, 1, 0, 3).ravel().astype("<f4").tobytes())


def load_checkpoint(path) -> VoxelField:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a field checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    nx, ny, nz = struct.unpack_from("<III", raw, 8)
    bounds = struct.unpack_from("<6d", raw, 20)
    off = 20 + 48
    n = nx * ny * nz
    need = off + 4 * n + 12 * n
    if len(raw) < need:
        raise DataError(f"{path}: truncated checkpoint ({len(raw)} < {need} bytes)")
    density = (
        np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        .reshape(nz, ny, nx)
        .transpose(2, 1, 0)
        .astype(np.float64)
    )
    color = (
        np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off + 4 * n)
        .reshape(nz, ny, nx, 3)
        .transpose(2, 1, 0, 3)
        .astype(np.float64)
    )
    return VoxelField(density, color, np.array(bounds[:3]), np.array(bounds[3:]))
