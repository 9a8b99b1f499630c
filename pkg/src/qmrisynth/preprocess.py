"""Image preprocessing: percentile clipping, max normalization, center crop.

Percentiles use linear interpolation between order statistics and are
computed over masked voxels only.  The standard pipeline order is
clip -> normalize -> crop and is idempotent on its own output.
"""

from __future__ import annotations

import numpy as np


def clip_percentile(img, mask=None, lo=0.5, hi=99.5):
    """Clamp masked voxels to the [lo, hi] percentile range of the masked
    region; voxels outside the mask are left untouched (background stays 0)."""
    if mask is None:
        mask = np.ones(img.shape, dtype=bool)
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("empty mask: percentiles undefined")
    vals = img[m]
    p_lo, p_hi = np.percentile(vals, [lo, hi], method="linear")
    out = img.copy()
    out[m] = np.clip(vals, p_lo, p_hi)
    return out


def normalize_max(img, mask=None):
    """Divide by the masked maximum so the masked max becomes exactly 1."""
    if mask is None:
        mask = np.ones(img.shape, dtype=bool)
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("empty mask")
    peak = float(np.max(img[m]))
    if peak <= 0:
        raise ValueError("masked maximum is not positive; cannot normalize")
    return img / peak, peak


def center_crop(img, size):
    """Centered window of (h, w); when the margin is odd the extra row or
    column is dropped from the bottom/right."""
    h, w = size
    ih, iw = img.shape[:2]
    if h > ih or w > iw:
        raise ValueError(f"crop {h}x{w} larger than image {ih}x{iw}")
    top = (ih - h) // 2
    left = (iw - w) // 2
    return img[top:top + h, left:left + w, ...].copy()
