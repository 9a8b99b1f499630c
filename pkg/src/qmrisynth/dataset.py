"""Dataset assembly: phantom slices rendered into training records.

Each record holds three protocol-randomized weighted images (max-normalized,
noisy), the normalized target maps, the brain mask and full provenance.  The
pipeline per record: draw a phantom, percentile-clip the maps over the mask,
synthesize the three contrasts, add Rician noise, normalize each contrast by
its masked max, center-crop, and write one QMAP file plus a JSON sidecar.

Per-record seeding is derived from (master seed, record index), so any
record can be re-simulated bit-exactly from the stored metadata alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import RoiDisc
from .phantom import PhantomConfig, TissueStats, TissueTable, generate_phantom
from .physics import (CONTRASTS, ParamRange, ParametricMaps, ProtocolRanges,
                      ScanParams, add_rician_noise, sample_protocol,
                      synthesize_weighted)
from .preprocess import center_crop, clip_percentile, normalize_max
from .qmap_io import read_qmap, write_qmap

FORMAT_TAG = "qmrisynth-dataset-v1"
INPUT_CHANNELS = ("t1w", "t2w", "flair")
TARGET_CHANNELS = ("t1", "t2", "pd")
T1_NORM_MS = 6000.0
T2_NORM_MS = 3000.0


@dataclass
class SampleRecord:
    """One training/evaluation sample, fully in memory."""

    record_id: int
    inputs: np.ndarray        # (H, W, 3) float32, max-normalized contrasts
    targets: np.ndarray       # (H, W, 3) float32, unit-normalized t1/t2/pd
    mask: np.ndarray          # (H, W) bool
    params: list[ScanParams]  # one per contrast, canonical order
    norm: dict                # t1_ref, t2_ref, pd_max, per_contrast_max
    rois: list[RoiDisc]
    noise_sigma_rel: float
    seed_info: dict

    @property
    def shape(self):
        return self.mask.shape

    def raw_inputs(self):
        """Undo the per-contrast max normalization (for the fitting oracle)."""
        scales = np.array([self.norm["per_contrast_max"][c] for c in INPUT_CHANNELS],
                          dtype=np.float64)
        return self.inputs.astype(np.float64) * scales

    def target_maps(self) -> ParametricMaps:
        """Targets back in physical units (PD stays on its stored unit scale)."""
        t1 = self.targets[..., 0].astype(np.float64) * self.norm["t1_ref"]
        t2 = self.targets[..., 1].astype(np.float64) * self.norm["t2_ref"]
        pd = self.targets[..., 2].astype(np.float64) * self.norm["pd_max"]
        return ParametricMaps(t1=t1, t2=t2, pd=pd, mask=self.mask.copy())


def _record_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _simulate(master_seed: int, index: int, phantom_cfg: PhantomConfig,
              ranges: ProtocolRanges, noise_sigma_rel: float, crop):
    rng = _record_rng(master_seed, index)
    maps, labels, rois = generate_phantom(phantom_cfg, rng)
    m = maps.mask

    t1 = clip_percentile(maps.t1, m)
    t2 = clip_percentile(maps.t2, m)
    pd = clip_percentile(maps.pd, m)
    maps = ParametricMaps(t1=t1, t2=t2, pd=pd, mask=m).validate()

    params = [sample_protocol(c, ranges, rng) for c in CONTRASTS]
    inputs = []
    per_contrast_max = {}
    sigma_abs = {}
    for name, p in zip(INPUT_CHANNELS, params):
        img = synthesize_weighted(maps, p)
        sigma = noise_sigma_rel * float(np.mean(img.data[m])) if noise_sigma_rel > 0 else 0.0
        img = add_rician_noise(img, sigma, rng)
        normed, peak = normalize_max(img.data, m)
        inputs.append(normed.astype(np.float32))
        per_contrast_max[name] = peak
        sigma_abs[name] = sigma

    pd_max = float(np.max(maps.pd[m]))
    targets = [
        (maps.t1 / T1_NORM_MS).astype(np.float32),
        (maps.t2 / T2_NORM_MS).astype(np.float32),
        (maps.pd / pd_max).astype(np.float32),
    ]

    x = np.stack(inputs, axis=-1)
    y = np.stack(targets, axis=-1)
    mask = m
    if crop is not None and tuple(crop) != mask.shape:
        ch, cw = crop
        top = (mask.shape[0] - ch) // 2
        left = (mask.shape[1] - cw) // 2
        x = center_crop(x, (ch, cw))
        y = center_crop(y, (ch, cw))
        mask = center_crop(mask, (ch, cw))
        shifted = []
        for roi in rois:
            nx, ny = roi.x - left, roi.y - top
            r = roi.diameter / 2.0
            if r <= nx <= cw - 1 - r and r <= ny <= ch - 1 - r:
                shifted.append(RoiDisc(x=nx, y=ny, tissue=roi.tissue,
                                       diameter=roi.diameter))
        rois = shifted

    norm = {"t1_ref": T1_NORM_MS, "t2_ref": T2_NORM_MS, "pd_max": pd_max,
            "per_contrast_max": per_contrast_max}
    seed_info = {"master_seed": master_seed, "record_index": index}
    return SampleRecord(record_id=index, inputs=x, targets=y, mask=mask,
                        params=params, norm=norm, rois=rois,
                        noise_sigma_rel=noise_sigma_rel, seed_info=seed_info), sigma_abs


def _phantom_cfg_to_dict(cfg: PhantomConfig):
    d = dataclasses.asdict(cfg)
    return d


def _phantom_cfg_from_dict(d):
    d = dict(d)
    tissues = d.pop("tissues", None)
    table = TissueTable(**{k: TissueStats(**v) for k, v in tissues.items()}) \
        if tissues else TissueTable()
    return PhantomConfig(tissues=table, **d)


def _ranges_to_dict(r: ProtocolRanges):
    return {f.name: [getattr(r, f.name).lo, getattr(r, f.name).hi]
            for f in dataclasses.fields(r)}


def _ranges_from_dict(d):
    return ProtocolRanges(**{k: ParamRange(v[0], v[1]) for k, v in d.items()})


def build_dataset(out_dir, n_slices, seed, phantom_cfg=None, ranges=None,
                  noise_sigma_rel=0.01, crop=None):
    """Write ``n_slices`` records under ``out_dir``; returns the metadata dict.

    Fully deterministic under a fixed seed: two runs produce byte-identical
    directories.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    phantom_cfg = phantom_cfg or PhantomConfig()
    ranges = ranges or ProtocolRanges()
    out = Path(out_dir)
    rec_dir = out / "records"
    try:
        rec_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {rec_dir}: {e}") from e

    size = (phantom_cfg.height, phantom_cfg.width) if crop is None else tuple(crop)
    meta = {
        "format": FORMAT_TAG,
        "n_records": int(n_slices),
        "seed": int(seed),
        "noise_sigma_rel": float(noise_sigma_rel),
        "height": size[0],
        "width": size[1],
        "phantom": _phantom_cfg_to_dict(phantom_cfg),
        "ranges": _ranges_to_dict(ranges),
        "crop": list(crop) if crop is not None else None,
    }
    for i in range(n_slices):
        rec, sigma_abs = _simulate(seed, i, phantom_cfg, ranges, noise_sigma_rel, crop)
        stem = rec_dir / f"rec_{i:05d}"
        channels = {name: rec.inputs[..., k] for k, name in enumerate(INPUT_CHANNELS)}
        channels.update({name: rec.targets[..., k]
                         for k, name in enumerate(TARGET_CHANNELS)})
        channels["mask"] = rec.mask.astype(np.float32)
        write_qmap(f"{stem}.qmap", channels)
        sidecar = {
            "record_id": i,
            "seed": rec.seed_info,
            "noise_sigma_rel": rec.noise_sigma_rel,
            "noise_sigma_abs": sigma_abs,
            "params": {name: p.to_dict() for name, p in zip(INPUT_CHANNELS, rec.params)},
            "norm": rec.norm,
            "rois": [r.to_dict() for r in rec.rois],
        }
        Path(f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def read_record(dataset_dir, index) -> SampleRecord:
    stem = Path(dataset_dir) / "records" / f"rec_{index:05d}"
    try:
        channels = read_qmap(f"{stem}.qmap")
        sidecar = json.loads(Path(f"{stem}.json").read_text())
    except FileNotFoundError as e:
        raise FileNotFoundError(f"record {index} missing from {dataset_dir}: {e}") from e
    inputs = np.stack([channels[c] for c in INPUT_CHANNELS], axis=-1)
    targets = np.stack([channels[c] for c in TARGET_CHANNELS], axis=-1)
    mask = channels["mask"] > 0.5
    params = [ScanParams.from_dict(sidecar["params"][c]) for c in INPUT_CHANNELS]
    rois = [RoiDisc.from_dict(r) for r in sidecar["rois"]]
    return SampleRecord(record_id=sidecar["record_id"], inputs=inputs,
                        targets=targets, mask=mask, params=params,
                        norm=sidecar["norm"], rois=rois,
                        noise_sigma_rel=sidecar["noise_sigma_rel"],
                        seed_info=sidecar["seed"])


def load_dataset(dataset_dir):
    """Read metadata and all records of a dataset directory."""
    meta_path = Path(dataset_dir) / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset.json under {dataset_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT_TAG:
        raise ValueError(f"unrecognized dataset format: {meta.get('format')!r}")
    records = [read_record(dataset_dir, i) for i in range(meta["n_records"])]
    return meta, records


def resimulate_record(meta, index) -> SampleRecord:
    """Re-run the simulation for one record purely from dataset metadata."""
    phantom_cfg = _phantom_cfg_from_dict(meta["phantom"])
    ranges = _ranges_from_dict(meta["ranges"])
    crop = tuple(meta["crop"]) if meta.get("crop") else None
    rec, _ = _simulate(meta["seed"], index, phantom_cfg, ranges,
                       meta["noise_sigma_rel"], crop)
    return rec
