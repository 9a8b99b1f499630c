"""Closed-form MR signal synthesis for TSE and FLAIR sequences.

Signal models (times in ms, PD in arbitrary units):

    TSE:    S = PD * (1 - exp(-TR/T1)) * exp(-TE/T2)
    FLAIR:  S = |PD * (1 - 2*exp(-TI/T1) + exp(-TR/T1)) * exp(-TE/T2)|

FLAIR is emitted as a magnitude, matching how scanners reconstruct
magnitude images; the signed value can be negative for short TI.
All functions are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Sequence(enum.Enum):
    TSE_T1W = "t1w"
    TSE_T2W = "t2w"
    FLAIR = "flair"


#: canonical contrast order used for record channels and protocol lists
CONTRASTS = (Sequence.TSE_T1W, Sequence.TSE_T2W, Sequence.FLAIR)


@dataclass(frozen=True)
class ScanParams:
    """One acquisition protocol: sequence kind plus TR/TE/(TI) in ms."""

    sequence: Sequence
    tr_ms: float
    te_ms: float
    ti_ms: float | None = None

    def __post_init__(self):
        if self.tr_ms <= 0 or self.te_ms <= 0:
            raise ValueError(f"TR and TE must be positive, got TR={self.tr_ms} TE={self.te_ms}")
        if self.te_ms >= self.tr_ms:
            raise ValueError(f"TE must be < TR, got TE={self.te_ms} TR={self.tr_ms}")
        if self.sequence is Sequence.FLAIR:
            if self.ti_ms is None:
                raise ValueError("FLAIR requires an inversion time TI")
            if self.ti_ms <= 0 or self.ti_ms >= self.tr_ms:
                raise ValueError(f"TI must be in (0, TR), got TI={self.ti_ms} TR={self.tr_ms}")
        elif self.ti_ms is not None:
            raise ValueError(f"{self.sequence.value} does not take a TI")

    def to_dict(self):
        d = {"sequence": self.sequence.value, "tr": self.tr_ms, "te": self.te_ms}
        if self.ti_ms is not None:
            d["ti"] = self.ti_ms
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(Sequence(d["sequence"]), d["tr"], d["te"], d.get("ti"))


def _check_positive_relaxation(t1_ms, t2_ms):
    if np.any(np.asarray(t1_ms) <= 0) or np.any(np.asarray(t2_ms) <= 0):
        raise ValueError("T1 and T2 must be positive")


def signal_tse(pd, t1_ms, t2_ms, tr_ms, te_ms):
    """Spin-echo steady-state intensity; 0 wherever pd is 0."""
    _check_positive_relaxation(t1_ms, t2_ms)
    if tr_ms <= 0 or te_ms <= 0:
        raise ValueError("TR and TE must be positive")
    return pd * (1.0 - np.exp(-tr_ms / np.asarray(t1_ms, dtype=float))) \
        * np.exp(-te_ms / np.asarray(t2_ms, dtype=float))


def signal_flair(pd, t1_ms, t2_ms, tr_ms, te_ms, ti_ms):
    """Inversion-recovery spin-echo magnitude intensity."""
    _check_positive_relaxation(t1_ms, t2_ms)
    if tr_ms <= 0 or te_ms <= 0 or ti_ms <= 0:
        raise ValueError("TR, TE and TI must be positive")
    if ti_ms >= tr_ms:
        raise ValueError(f"TI must be < TR, got TI={ti_ms} TR={tr_ms}")
    t1 = np.asarray(t1_ms, dtype=float)
    t2 = np.asarray(t2_ms, dtype=float)
    recov = 1.0 - 2.0 * np.exp(-ti_ms / t1) + np.exp(-tr_ms / t1)
    return np.abs(pd * recov * np.exp(-te_ms / t2))


def flair_recovery_signed(t1_ms, tr_ms, ti_ms):
    """Longitudinal term of the FLAIR signal before the magnitude is taken.

    Its sign distinguishes the two branches of the magnitude kink; fitting
    code uses it to orient derivatives.
    """
    t1 = np.asarray(t1_ms, dtype=float)
    return 1.0 - 2.0 * np.exp(-ti_ms / t1) + np.exp(-tr_ms / t1)


def signal_for(params: ScanParams, pd, t1_ms, t2_ms):
    """Evaluate the signal model selected by ``params.sequence``."""
    if params.sequence is Sequence.FLAIR:
        return signal_flair(pd, t1_ms, t2_ms, params.tr_ms, params.te_ms, params.ti_ms)
    return signal_tse(pd, t1_ms, t2_ms, params.tr_ms, params.te_ms)


# ---------------------------------------------------------------------------
# Parametric maps
# ---------------------------------------------------------------------------

T1_RANGE_MS = (100.0, 6000.0)
T2_RANGE_MS = (10.0, 3000.0)


@dataclass
class ParametricMaps:
    """Per-slice T1 (ms), T2 (ms) and PD images plus the brain mask.

    Inside the mask T1 and T2 stay within physiological bounds and
    T1 >= T2 voxel-wise; every channel is exactly zero outside the mask.
    """

    t1: np.ndarray
    t2: np.ndarray
    pd: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shapes = {self.t1.shape, self.t2.shape, self.pd.shape, self.mask.shape}
        if len(shapes) != 1:
            raise ValueError(f"map channels disagree in shape: {shapes}")
        if self.mask.dtype != bool:
            self.mask = self.mask.astype(bool)

    @property
    def shape(self):
        return self.t1.shape

    def validate(self):
        m = self.mask
        if m.any():
            t1_in, t2_in = self.t1[m], self.t2[m]
            if t1_in.min() < T1_RANGE_MS[0] or t1_in.max() > T1_RANGE_MS[1]:
                raise ValueError("T1 outside physiological range inside mask")
            if t2_in.min() < T2_RANGE_MS[0] or t2_in.max() > T2_RANGE_MS[1]:
                raise ValueError("T2 outside physiological range inside mask")
            if np.any(t1_in < t2_in):
                raise ValueError("T1 < T2 inside mask")
            if np.any(self.pd[m] < 0):
                raise ValueError("negative PD inside mask")
        out = ~m
        for name, ch in (("t1", self.t1), ("t2", self.t2), ("pd", self.pd)):
            if np.any(ch[out] != 0):
                raise ValueError(f"{name} nonzero outside mask")
        return self


@dataclass
class WeightedImage:
    """A contrast image bound to the protocol that produced it."""

    contrast: Sequence
    data: np.ndarray
    params: ScanParams
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if np.any(self.data < 0):
            raise ValueError("magnitude image must be nonnegative")


def synthesize_weighted(maps: ParametricMaps, params: ScanParams) -> WeightedImage:
    """Voxel-wise signal synthesis; zero outside the brain mask."""
    m = maps.mask
    out = np.zeros(maps.shape, dtype=np.float64)
    if m.any():
        out[m] = signal_for(params, maps.pd[m], maps.t1[m], maps.t2[m])
    return WeightedImage(contrast=params.sequence, data=out, params=params)


def add_rician_noise(img: WeightedImage, sigma: float, rng: np.random.Generator) -> WeightedImage:
    """Magnitude-image noise: sqrt((v+n1)^2 + n2^2) with n1,n2 ~ N(0, sigma^2).

    sigma == 0 returns the image unchanged (bit-identical data).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    n1 = rng.normal(0.0, sigma, size=img.data.shape)
    n2 = rng.normal(0.0, sigma, size=img.data.shape)
    noisy = np.sqrt((img.data + n1) ** 2 + n2 ** 2)
    return WeightedImage(contrast=img.contrast, data=noisy,
                         params=img.params, noise_sigma=sigma)


# ---------------------------------------------------------------------------
# Protocol randomization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"range must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    def draw(self, rng):
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class ProtocolRanges:
    """Uniform randomization windows per sequence, bracketing typical
    clinical protocols but deliberately wider."""

    t1w_tr: ParamRange = ParamRange(300.0, 900.0)
    t1w_te: ParamRange = ParamRange(5.0, 25.0)
    t2w_tr: ParamRange = ParamRange(2000.0, 6000.0)
    t2w_te: ParamRange = ParamRange(70.0, 130.0)
    flair_tr: ParamRange = ParamRange(6000.0, 10000.0)
    flair_te: ParamRange = ParamRange(80.0, 140.0)
    flair_ti: ParamRange = ParamRange(1800.0, 2800.0)

    def for_sequence(self, seq: Sequence):
        if seq is Sequence.TSE_T1W:
            return self.t1w_tr, self.t1w_te, None
        if seq is Sequence.TSE_T2W:
            return self.t2w_tr, self.t2w_te, None
        return self.flair_tr, self.flair_te, self.flair_ti


_MAX_PROTOCOL_RETRIES = 100


def sample_protocol(contrast: Sequence, ranges: ProtocolRanges,
                    rng: np.random.Generator) -> ScanParams:
    """Independent uniform draw per parameter, rejection-resampled until the
    protocol invariants (TE < TR, TI < TR) hold."""
    tr_r, te_r, ti_r = ranges.for_sequence(contrast)
    for _ in range(_MAX_PROTOCOL_RETRIES):
        tr = tr_r.draw(rng)
        te = te_r.draw(rng)
        ti = ti_r.draw(rng) if ti_r is not None else None
        try:
            return ScanParams(contrast, tr, te, ti)
        except ValueError:
            continue
    raise ValueError(
        f"could not draw a valid {contrast.value} protocol from {ranges} "
        f"after {_MAX_PROTOCOL_RETRIES} attempts")


def default_protocols(rng: np.random.Generator,
                      ranges: ProtocolRanges | None = None) -> list[ScanParams]:
    """One protocol per contrast, in canonical order."""
    ranges = ranges or ProtocolRanges()
    return [sample_protocol(c, ranges, rng) for c in CONTRASTS]
