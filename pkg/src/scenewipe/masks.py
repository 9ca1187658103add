"""Binary per-view masks and their PNG file convention.

Mask files are 8-bit single-channel PNGs (0 = background, 255 =
foreground) named ``<image_name>.mask.png``.
"""

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import rasterize


@dataclass
class Mask:
    """Binary bitmap aligned to one view; bitmap is (height, width) bool."""

    bitmap: np.ndarray

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise ValueError("mask bitmap must be 2-D (height, width)")

    @property
    def width(self):
        return self.bitmap.shape[1]

    @property
    def height(self):
        return self.bitmap.shape[0]

    @staticmethod
    def empty(width, height):
        return Mask(np.zeros((height, width), dtype=bool))

    @staticmethod
    def full(width, height):
        return Mask(np.ones((height, width), dtype=bool))

    def foreground_count(self):
        return int(self.bitmap.sum())

    def contains_point(self, x, y):
        """Whether continuous coordinate (x, y) rasterizes onto foreground."""
        px = min(max(rasterize(x), 0), self.width - 1)
        py = min(max(rasterize(y), 0), self.height - 1)
        return bool(self.bitmap[py, px])

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.bitmap.shape == other.bitmap.shape and bool(
            np.array_equal(self.bitmap, other.bitmap)
        )


def mask_filename(image_name):
    return f"{image_name}.mask.png"


def save_mask_png(mask: Mask, path):
    data = np.where(mask.bitmap, 255, 0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(Path(path))


def load_mask_png(path):
    img = PILImage.open(Path(path)).convert("L")
    return Mask(np.asarray(img) > 127)


def mask_to_png_bytes(mask: Mask) -> bytes:
    data = np.where(mask.bitmap, 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(data, mode="L").save(buf, format="PNG")
    return buf.getvalue()
