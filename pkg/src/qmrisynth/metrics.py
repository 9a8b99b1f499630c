"""Image-quality metrics for predicted vs reference quantitative maps.

MAE, mean percentage error, PSNR (peak = masked reference max), SSIM with a
uniform 11x11 window, normalized-squared-error maps, and disc-ROI tissue
means.  All metrics are restricted to the brain mask.  Pure functions; the
naive double-loop oracles these are tested against live in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _masked(x, y, mask):
    if x.shape != y.shape or x.shape != mask.shape:
        raise ValueError(f"shape mismatch: {x.shape}, {y.shape}, mask {mask.shape}")
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("empty mask")
    return x[m], y[m]


def mae(x, y, mask):
    """Mean absolute error over masked voxels."""
    xv, yv = _masked(x, y, mask)
    return float(np.mean(np.abs(xv - yv)))


def mpe(x, y, mask, eps=None):
    """Mean |relative| error over masked voxels with |reference| > eps.

    Voxels whose reference magnitude is at or below eps are excluded from
    both the sum and the count; eps defaults to 1e-6 of the masked
    reference range.
    """
    xv, yv = _masked(x, y, mask)
    if eps is None:
        eps = 1e-6 * float(np.ptp(yv)) if np.ptp(yv) > 0 else 1e-6
    keep = np.abs(yv) > eps
    if not keep.any():
        raise ValueError("all reference voxels below eps; MPE undefined")
    return float(np.mean(np.abs((xv[keep] - yv[keep]) / yv[keep])))


def mse(x, y, mask):
    xv, yv = _masked(x, y, mask)
    return float(np.mean((xv - yv) ** 2))


def psnr(x, y, mask):
    """10*log10(max(y)^2 / MSE) over the mask, in dB; inf when MSE == 0."""
    xv, yv = _masked(x, y, mask)
    err = float(np.mean((xv - yv) ** 2))
    if err == 0.0:
        return math.inf
    peak = float(np.max(yv))
    return 10.0 * math.log10(peak * peak / err)


def ssim(x, y, mask=None, window=11, k1=0.01, k2=0.03, data_range=None):
    """Mean local SSIM with a uniform ``window`` x ``window`` patch.

    Patch statistics use population moments.  Only window centers whose full
    patch lies inside the image and inside the mask contribute (the mask
    eroded by the square window).  ``data_range`` defaults to the masked
    reference max-min; a zero range falls back to 1.0 so constant images
    stay well-defined.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than {window}x{window} window")
    m = np.ones(x.shape, dtype=bool) if mask is None else mask.astype(bool)
    if data_range is None:
        yv = y[m]
        if yv.size == 0:
            raise ValueError("empty mask")
        data_range = float(np.ptp(yv))
        if data_range == 0.0:
            data_range = 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    xw = sliding_window_view(x.astype(np.float64, copy=False), (window, window))
    yw = sliding_window_view(y.astype(np.float64, copy=False), (window, window))
    mw = sliding_window_view(m, (window, window))
    valid = mw.all(axis=(2, 3))
    if not valid.any():
        raise ValueError("no full window fits inside the mask")
    n = window * window
    mu_x = xw.sum(axis=(2, 3)) / n
    mu_y = yw.sum(axis=(2, 3)) / n
    ex2 = (xw * xw).sum(axis=(2, 3)) / n
    ey2 = (yw * yw).sum(axis=(2, 3)) / n
    exy = (xw * yw).sum(axis=(2, 3)) / n
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = num / den
    return float(np.mean(smap[valid]))


def nse_map(pred, ref, mask, eps=1e-9):
    """Per-voxel normalized squared error (pred-ref)^2 / ref * 100, zero
    where |ref| <= eps or outside the mask."""
    if pred.shape != ref.shape or pred.shape != mask.shape:
        raise ValueError("shape mismatch")
    out = np.zeros(pred.shape, dtype=np.float64)
    m = mask.astype(bool) & (np.abs(ref) > eps)
    d = pred[m] - ref[m]
    out[m] = d * d / ref[m] * 100.0
    return out


# ---------------------------------------------------------------------------
# ROI statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiDisc:
    """Circular region of interest: center (x, y) in pixel coordinates,
    fixed diameter in pixels, and the tissue it samples."""

    x: float
    y: float
    tissue: str
    diameter: float = 8.0

    def to_dict(self):
        return {"x": self.x, "y": self.y, "tissue": self.tissue,
                "diameter": self.diameter}

    @classmethod
    def from_dict(cls, d):
        return cls(x=d["x"], y=d["y"], tissue=d["tissue"],
                   diameter=d.get("diameter", 8.0))


def roi_mask(shape, roi: RoiDisc):
    """Boolean mask of voxels whose center lies within radius (inclusive)."""
    h, w = shape
    r = roi.diameter / 2.0
    if not (0 <= roi.x < w and 0 <= roi.y < h):
        raise ValueError(f"ROI center ({roi.x}, {roi.y}) outside {h}x{w} image")
    if roi.x - r < -0.5 or roi.x + r > w - 0.5 or roi.y - r < -0.5 or roi.y + r > h - 0.5:
        raise ValueError(f"ROI disc at ({roi.x}, {roi.y}) extends outside the image")
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - roi.x) ** 2 + (yy - roi.y) ** 2 <= r * r


def roi_mean(img, roi: RoiDisc):
    """Mean map value over the ROI disc."""
    sel = roi_mask(img.shape, roi)
    return float(img[sel].mean())


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

MAP_NAMES = ("t1", "t2", "pd")
NORM_REFS_MS = {"t1": 6000.0, "t2": 3000.0}


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    if np.isinf(arr).any():
        # infinite PSNR (zero error) dominates; flag rather than emit NaN std
        return {"mean": math.inf, "std": 0.0, "values": [float(v) for v in values]}
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": mean, "std": std, "values": [float(v) for v in values]}


@dataclass
class MetricsReport:
    """Per-map metric summaries plus per-tissue ROI means.

    ``maps[name][metric]`` holds mean/std across slices and the per-slice
    values; ``rois[tissue][map]`` holds averaged predicted vs reference ROI
    means; ``renders`` lists any image files written alongside.
    """

    maps: dict = field(default_factory=dict)
    rois: dict = field(default_factory=dict)
    renders: list = field(default_factory=list)
    n_slices: int = 0

    def to_json(self, indent=2):
        return json.dumps({"n_slices": self.n_slices, "maps": self.maps,
                           "rois": self.rois, "renders": self.renders},
                          indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(maps=d["maps"], rois=d["rois"], renders=d["renders"],
                   n_slices=d["n_slices"])


def _unit_scale(channel, values, mask):
    """Bring a map onto the unit scale used for cross-map comparability."""
    if channel in NORM_REFS_MS:
        return values / NORM_REFS_MS[channel]
    mx = float(np.max(values[mask])) if mask.any() else 0.0
    return values / mx if mx > 0 else values.copy()


def evaluate(preds, refs, rois=None):
    """Compare predicted against reference maps slice by slice.

    ``preds``/``refs`` are equal-length sequences of ParametricMaps (a single
    pair is accepted too).  PD channels of both sides are rescaled to [0, 1]
    over the mask before any metric; T1/T2 are compared in milliseconds with
    an additional unit-scale MAE.  ``rois`` is one list of RoiDisc per slice.
    """
    if not isinstance(preds, (list, tuple)):
        preds, refs = [preds], [refs]
        rois = [rois] if rois is not None else None
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} predictions vs {len(refs)} references")

    per_map = {name: {"mae": [], "mae_norm": [], "mpe": [], "psnr_db": [], "ssim": []}
               for name in MAP_NAMES}
    roi_acc = {}

    for i, (p, r) in enumerate(zip(preds, refs)):
        if p.shape != r.shape:
            raise ValueError(f"slice {i}: shape mismatch {p.shape} vs {r.shape}")
        m = r.mask
        channels = {
            "t1": (p.t1, r.t1),
            "t2": (p.t2, r.t2),
            "pd": (_unit_scale("pd", p.pd, m), _unit_scale("pd", r.pd, m)),
        }
        for name, (pc, rc) in channels.items():
            stats = per_map[name]
            stats["mae"].append(mae(pc, rc, m))
            stats["mae_norm"].append(mae(_unit_scale(name, pc, m) if name != "pd" else pc,
                                         _unit_scale(name, rc, m) if name != "pd" else rc, m))
            stats["mpe"].append(mpe(pc, rc, m))
            stats["psnr_db"].append(psnr(pc, rc, m))
            stats["ssim"].append(ssim(pc, rc, mask=m))
        slice_rois = rois[i] if rois is not None else []
        for roi in slice_rois or []:
            for name, (pc, rc) in channels.items():
                key = roi_acc.setdefault(roi.tissue, {}).setdefault(
                    name, {"pred": [], "ref": []})
                key["pred"].append(roi_mean(pc, roi))
                key["ref"].append(roi_mean(rc, roi))

    report = MetricsReport(n_slices=len(preds))
    for name, stats in per_map.items():
        report.maps[name] = {metric: _mean_std(vals) for metric, vals in stats.items()}
    for tissue, by_map in roi_acc.items():
        report.rois[tissue] = {
            name: {"pred": float(np.mean(v["pred"])), "ref": float(np.mean(v["ref"]))}
            for name, v in by_map.items()}
    return report
