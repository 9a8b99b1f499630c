"""Procedural digital brain phantoms with known ground-truth maps.

Each phantom is an elliptical head built from concentric zones: a central
CSF cavity (stylized ventricle), a white-matter bulk, a cortical gray-matter
ribbon, and optional white-matter lesion discs.  Tissue T1/T2/PD values are
drawn per phantom from literature means and standard deviations, clamped to
physiological ranges with T2 kept strictly below T1.  One disc ROI per
tissue is placed fully inside its region for downstream tissue statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .metrics import RoiDisc, roi_mask
from .physics import ParametricMaps, T1_RANGE_MS, T2_RANGE_MS

LABEL_NAMES = {0: "background", 1: "wm", 2: "gm", 3: "csf", 4: "lesion"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}


@dataclass(frozen=True)
class TissueStats:
    t1_mean: float
    t1_std: float
    t2_mean: float
    t2_std: float
    pd_mean: float
    pd_std: float


@dataclass(frozen=True)
class TissueTable:
    """Per-tissue relaxation/density priors (ms / arbitrary units).

    WM/GM/CSF defaults are literature means for healthy adult brain at 3 T;
    the lesion class is a synthetic T2-hyperintense white-matter lesion.
    """

    wm: TissueStats = TissueStats(789.78, 74.12, 83.12, 5.69, 766.01, 44.87)
    gm: TissueStats = TissueStats(1266.35, 169.82, 100.28, 12.90, 988.17, 71.18)
    csf: TissueStats = TissueStats(3918.05, 155.11, 1064.94, 214.37, 1737.31, 55.78)
    lesion: TissueStats = TissueStats(1580.0, 180.0, 220.0, 30.0, 950.0, 70.0)

    def stats_for(self, tissue: str) -> TissueStats:
        return getattr(self, tissue)

    def draw(self, tissue: str, rng: np.random.Generator):
        """One (t1, t2, pd) draw, clamped to physical ranges, T2 < T1."""
        s = self.stats_for(tissue)
        t1 = float(np.clip(rng.normal(s.t1_mean, s.t1_std), *T1_RANGE_MS))
        t2 = float(np.clip(rng.normal(s.t2_mean, s.t2_std), *T2_RANGE_MS))
        t2 = min(t2, 0.95 * t1)
        t2 = max(t2, T2_RANGE_MS[0])
        pd = max(float(rng.normal(s.pd_mean, s.pd_std)), 1.0)
        return t1, t2, pd


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 64
    width: int = 64
    lesion_prob: float = 0.3
    max_lesions: int = 2
    roi_diameter: float = 8.0
    tissues: TissueTable = field(default_factory=TissueTable)

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError(f"phantom must be at least 32x32, got {self.height}x{self.width}")
        if not 0.0 <= self.lesion_prob <= 1.0:
            raise ValueError("lesion_prob must be in [0, 1]")


def _place_roi(labels, label_id, tissue, diameter, required):
    """Deterministically pick a disc center fully inside one label region:
    erode by the disc footprint, then take the candidate nearest the region
    centroid (row-major on ties)."""
    region = labels == label_id
    if not region.any():
        if required:
            raise ValueError(f"no {tissue} region present to place an ROI in")
        return None
    r = int(np.ceil(diameter / 2.0))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    foot = xx * xx + yy * yy <= (diameter / 2.0) ** 2
    eroded = ndimage.binary_erosion(region, structure=foot, border_value=0)
    cand = np.argwhere(eroded)
    if cand.size == 0:
        if required:
            raise ValueError(
                f"image too small to place a {diameter:g}px ROI inside {tissue}; "
                f"increase the phantom size")
        return None
    cy, cx = np.argwhere(region).mean(axis=0)
    d2 = (cand[:, 0] - cy) ** 2 + (cand[:, 1] - cx) ** 2
    best = cand[int(np.argmin(d2))]
    return RoiDisc(x=float(best[1]), y=float(best[0]), tissue=tissue,
                   diameter=diameter)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator):
    """Build one phantom slice.

    Returns (ParametricMaps, label image, list of RoiDisc).  Reproducible:
    the same config and generator state give an identical phantom.
    """
    h, w = cfg.height, cfg.width
    cy = h / 2.0 + rng.uniform(-1.5, 1.5)
    cx = w / 2.0 + rng.uniform(-1.5, 1.5)
    a = 0.46 * h * rng.uniform(0.95, 1.0)
    b = 0.42 * w * rng.uniform(0.95, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt(((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2)

    r_csf = rng.uniform(0.20, 0.26)
    r_wm = rng.uniform(0.52, 0.60)

    labels = np.zeros((h, w), dtype=np.uint8)
    labels[r <= 1.0] = LABEL_IDS["gm"]
    labels[r <= r_wm] = LABEL_IDS["wm"]
    labels[r <= r_csf] = LABEL_IDS["csf"]

    # optional lesion discs, confined to the white-matter annulus
    if rng.uniform() < cfg.lesion_prob and cfg.max_lesions > 0:
        n_lesions = int(rng.integers(1, cfg.max_lesions + 1))
        for _ in range(n_lesions):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = rng.uniform(r_csf + 0.12, r_wm - 0.12)
            ly = cy + rad * a * np.sin(ang)
            lx = cx + rad * b * np.cos(ang)
            lr = rng.uniform(2.5, 4.5)
            disc = (yy - ly) ** 2 + (xx - lx) ** 2 <= lr * lr
            labels[disc & (labels == LABEL_IDS["wm"])] = LABEL_IDS["lesion"]

    mask = labels > 0
    t1 = np.zeros((h, w), dtype=np.float64)
    t2 = np.zeros((h, w), dtype=np.float64)
    pd = np.zeros((h, w), dtype=np.float64)
    for tissue in ("wm", "gm", "csf", "lesion"):
        sel = labels == LABEL_IDS[tissue]
        if not sel.any():
            continue
        t1v, t2v, pdv = cfg.tissues.draw(tissue, rng)
        t1[sel], t2[sel], pd[sel] = t1v, t2v, pdv

    rois = []
    for tissue in ("wm", "gm", "csf"):
        rois.append(_place_roi(labels, LABEL_IDS[tissue], tissue,
                               cfg.roi_diameter, required=True))
    lesion_roi = _place_roi(labels, LABEL_IDS["lesion"], "lesion",
                            cfg.roi_diameter, required=False)
    if lesion_roi is not None:
        rois.append(lesion_roi)

    maps = ParametricMaps(t1=t1, t2=t2, pd=pd, mask=mask).validate()
    return maps, labels, rois
