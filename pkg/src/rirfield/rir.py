"""
Impulse-response analysis
=========================

Schroeder energy decay, octave-band filtering, RT60 / DRR estimation and the
error measures used to compare a generated RIR with a reference one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import (
    BandOutOfRange,
    InsufficientDecay,
    InvalidImpulseResponse,
    IoError,
    RateMismatch,
    ZeroEnergy,
)

EDC_FLOOR_DB = -120.0
DRR_CLAMP_DB = 60.0
DIRECT_WINDOW_S = 0.0025
FIT_START_DB = -5.0
FIT_END_DB = -25.0
EDF_LIMIT_DB = -30.0
DEFAULT_CENTERS = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)


@dataclass(frozen=True)
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise InvalidImpulseResponse("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise InvalidImpulseResponse("samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidImpulseResponse(f"bad sample rate {self.sample_rate!r}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class BandSpec:
    """Octave bands, each spanning ``center/sqrt(2)`` to ``center*sqrt(2)``."""

    centers: tuple = DEFAULT_CENTERS

    def __post_init__(self):
        c = tuple(float(f) for f in self.centers)
        if len(c) < 1:
            raise ValueError("need at least one band")
        if any(f <= 0 for f in c) or any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("band centers must be positive and strictly increasing")
        object.__setattr__(self, "centers", c)

    def __len__(self):
        return len(self.centers)

    @staticmethod
    def edges(center_hz: float) -> tuple[float, float]:
        return center_hz / math.sqrt(2.0), center_hz * math.sqrt(2.0)

    def check(self, sample_rate: int) -> None:
        for c in self.centers:
            _check_band(c, sample_rate)

    @classmethod
    def parse(cls, text: str) -> "BandSpec":
        """``"default"`` or a comma separated list of center frequencies."""
        if text.strip().lower() == "default":
            return cls()
        return cls(tuple(float(t) for t in text.split(",") if t.strip()))


@dataclass(frozen=True)
class EnergyDecayCurve:
    values_db: np.ndarray
    sample_rate: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values_db.size) / self.sample_rate


@dataclass(frozen=True)
class Rt60Fingerprint:
    rt60_s: np.ndarray = field()

    def __post_init__(self):
        v = np.asarray(self.rt60_s, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("fingerprint entries must be positive and finite")
        object.__setattr__(self, "rt60_s", v)

    def __len__(self):
        return self.rt60_s.size


@dataclass(frozen=True)
class MetricErrors:
    rt60_err_pct: float
    edf_err_db: float
    drr_err_db: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.rt60_err_pct, self.edf_err_db, self.drr_err_db)


def _check_band(center_hz: float, sample_rate: int) -> None:
    lo, hi = BandSpec.edges(center_hz)
    if lo <= 0 or hi >= sample_rate / 2.0:
        raise BandOutOfRange(
            f"octave band at {center_hz:g} Hz ({lo:.1f}-{hi:.1f} Hz) "
            f"does not fit below Nyquist {sample_rate / 2:g} Hz"
        )


def schroeder_edc(ir: ImpulseResponse, floor_db: float = EDC_FLOOR_DB) -> EnergyDecayCurve:
    """Backward-integrated energy decay in dB, normalized to 0 dB at the first sample."""
    energy = ir.samples**2
    total = energy.sum()
    if total <= 0.0:
        raise ZeroEnergy("impulse response carries no energy")
    tail = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(tail / tail[0])
    db[0] = 0.0
    db = np.maximum(db, floor_db)
    # float rounding in the cumulative sum can produce tiny upticks
    db = np.minimum.accumulate(db)
    return EnergyDecayCurve(db, ir.sample_rate)


def _band_sos(center_hz: float, sample_rate: int) -> np.ndarray:
    lo, hi = BandSpec.edges(center_hz)
    # order-2 prototype -> 4th-order band-pass
    return signal.butter(2, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")


def band_filter(ir: ImpulseResponse, center_hz: float) -> ImpulseResponse:
    """Causal 4th-order Butterworth band-pass, one octave wide around ``center_hz``."""
    _check_band(center_hz, ir.sample_rate)
    y = signal.sosfilt(_band_sos(center_hz, ir.sample_rate), ir.samples)
    return ImpulseResponse(y, ir.sample_rate)


def rt60_single(edc: EnergyDecayCurve) -> float:
    """
    RT60 from a least-squares line through the -5..-25 dB part of the decay curve,
    extrapolated to -60 dB.
    """
    v = np.asarray(edc.values_db)
    below_start = np.flatnonzero(v <= FIT_START_DB)
    if below_start.size == 0 or v.min() > FIT_END_DB:
        raise InsufficientDecay(f"decay curve bottoms out at {v.min():.1f} dB, need {FIT_END_DB} dB")
    i0 = below_start[0]
    i1 = np.flatnonzero(v >= FIT_END_DB)[-1]
    if i1 <= i0:
        raise InsufficientDecay("decay segment too short to fit")
    t = np.arange(i0, i1 + 1) / edc.sample_rate
    slope, _ = np.polyfit(t, v[i0 : i1 + 1], 1)
    if not slope < 0:
        raise InsufficientDecay("non-negative decay slope")
    return -60.0 / slope


def broadband_rt60(ir: ImpulseResponse) -> float:
    return rt60_single(schroeder_edc(ir))


def multiband_rt60(ir: ImpulseResponse, bands: BandSpec | None = None) -> Rt60Fingerprint:
    """
    Per-band RT60 fingerprint.

    A band whose decay never reaches -25 dB takes the broadband RT60 instead, so
    the fingerprint always has one finite entry per band.
    """
    bands = bands or BandSpec()
    bands.check(ir.sample_rate)
    out = np.empty(len(bands))
    fallback = None
    for b, center in enumerate(bands.centers):
        try:
            out[b] = rt60_single(schroeder_edc(band_filter(ir, center)))
        except (InsufficientDecay, ZeroEnergy):
            if fallback is None:
                fallback = broadband_rt60(ir)
            out[b] = fallback
    return Rt60Fingerprint(out)


def drr(ir: ImpulseResponse, window_s: float = DIRECT_WINDOW_S) -> float:
    """Direct-to-reverberant ratio in dB, clamped to +/-60 dB."""
    energy = ir.samples**2
    total = energy.sum()
    if total <= 0.0:
        raise ZeroEnergy("impulse response carries no energy")
    peak = int(np.argmax(np.abs(ir.samples)))
    w = int(round(window_s * ir.sample_rate))
    lo, hi = max(peak - w, 0), peak + w + 1
    direct = energy[lo:hi].sum()
    late = energy[:lo].sum() + energy[hi:].sum()
    if late <= 0.0:
        return DRR_CLAMP_DB
    if direct <= 0.0:
        return -DRR_CLAMP_DB
    return float(np.clip(10.0 * np.log10(direct / late), -DRR_CLAMP_DB, DRR_CLAMP_DB))


def edf_error(pred: ImpulseResponse, ref: ImpulseResponse, limit_db: float = EDF_LIMIT_DB) -> float:
    """Mean absolute dB gap between the two decay curves until ``ref`` falls to ``limit_db``."""
    e_ref = schroeder_edc(ref).values_db
    e_pred = schroeder_edc(pred).values_db
    n = min(e_ref.size, e_pred.size)
    below = np.flatnonzero(e_ref[:n] <= limit_db)
    stop = below[0] if below.size else n
    stop = max(stop, 1)
    return float(np.mean(np.abs(e_pred[:stop] - e_ref[:stop])))


def metric_errors(pred: ImpulseResponse, ref: ImpulseResponse, bands: BandSpec | None = None) -> MetricErrors:
    """RT60 relative error (fraction, averaged over bands), EDF error and DRR error."""
    if pred.sample_rate != ref.sample_rate:
        raise RateMismatch(f"{pred.sample_rate} Hz vs {ref.sample_rate} Hz")
    bands = bands or BandSpec()
    rt_p = multiband_rt60(pred, bands).rt60_s
    rt_r = multiband_rt60(ref, bands).rt60_s
    rt_err = float(np.mean(np.abs(rt_p - rt_r) / rt_r))
    return MetricErrors(rt_err, edf_error(pred, ref), abs(drr(pred) - drr(ref)))


# --- file formats -----------------------------------------------------------


def read_wav(path: str | Path) -> ImpulseResponse:
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise IoError(f"cannot read {path}: {e}") from e
    data = np.asarray(data)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        x = data.astype(np.float64)
    return ImpulseResponse(x, sr)


def write_wav(path: str | Path, ir: ImpulseResponse) -> None:
    try:
        wavfile.write(str(path), ir.sample_rate, ir.samples.astype(np.float32))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


REPORT_COLUMNS = ("room_id", "pair_id", "rt60_err_pct", "edf_err_db", "drr_err_db")


def write_metric_report(path: str | Path, rows: Iterable[tuple[str, str, MetricErrors]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for room_id, pair_id, m in rows:
            w.writerow([room_id, pair_id, *(f"{v:.6f}" for v in m.as_tuple())])


def exponential_rir(
    tau_s: float,
    sample_rate: int = 16000,
    duration_s: float | None = None,
    carrier: str = "envelope",
    seed: int = 0,
    bands: BandSpec | None = None,
) -> ImpulseResponse:
    """
    Synthetic RIR with an ``exp(-t/tau)`` envelope, whose ideal RT60 is ``3 tau ln 10``.

    ``carrier`` selects what the envelope modulates: ``"envelope"`` (constant one),
    ``"noise"`` (seeded Gaussian noise) or ``"multisine"`` (one sinusoid per band
    center, so every octave band sees the same clean decay).
    """
    if duration_s is None:
        duration_s = max(8.0 * tau_s, 0.1)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if carrier == "envelope":
        c = np.ones(n)
    elif carrier == "noise":
        c = np.random.default_rng(seed).standard_normal(n)
    elif carrier == "multisine":
        centers = (bands or BandSpec()).centers
        c = sum(np.sin(2 * np.pi * f * t + i) for i, f in enumerate(centers))
    else:
        raise ValueError(f"unknown carrier {carrier!r}")
    return ImpulseResponse(np.exp(-t / tau_s) * c, sample_rate)


def as_impulse_responses(samples: Sequence[np.ndarray], sample_rate: int) -> list[ImpulseResponse]:
    return [ImpulseResponse(s, sample_rate) for s in samples]
