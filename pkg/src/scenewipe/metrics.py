"""Evaluation metrics: mask accuracy, mask IoU, and image PSNR."""

import numpy as np

from .masks import Mask


def _check_dims(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what} dimension mismatch: {a.shape} vs {b.shape}")


def mask_accuracy(pred: Mask, gt: Mask) -> float:
    """Fraction of pixels classified correctly, in [0, 1]."""
    _check_dims(pred.bitmap, gt.bitmap, "mask")
    return float(np.mean(pred.bitmap == gt.bitmap))


def mask_iou(pred: Mask, gt: Mask) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    _check_dims(pred.bitmap, gt.bitmap, "mask")
    union = np.sum(pred.bitmap | gt.bitmap)
    if union == 0:
        return 1.0
    return float(np.sum(pred.bitmap & gt.bitmap) / union)


def psnr(img_a, img_b, max_val=1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    _check_dims(a, b, "image")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_val * max_val / mse)
