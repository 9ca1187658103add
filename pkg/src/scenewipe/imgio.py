"""Image and depth-map file I/O.

Color images are PNGs holding floats in [0, 1] quantized to 8 bits.
Depth maps use single-channel PFM (portable float map): header
``Pf\\n<width> <height>\\n-1.0\\n`` followed by float32 scanlines stored
bottom-to-top; the negative scale marks little-endian data.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError


def inpaint_filename(image_name):
    return f"{image_name}.inpaint.png"


def depth_filename(image_name):
    return f"{image_name}.depth.pfm"


def save_image_png(image, path):
    """Save an (h, w, 3) float array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(Path(path))


def load_image_png(path):
    """Load an RGB PNG as an (h, w, 3) float array in [0, 1]."""
    img = PILImage.open(Path(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_pfm(depth, path):
    """Write an (h, w) float array as a grayscale little-endian PFM."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM scanlines run bottom-to-top.
        f.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path):
    """Read a grayscale PFM back into an (h, w) float64 array."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise DataError(f"{path}: not a grayscale PFM (magic {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype)
        if data.size != w * h:
            raise DataError(f"{path}: truncated PFM payload")
    return data.reshape(h, w)[::-1].astype(np.float64)
