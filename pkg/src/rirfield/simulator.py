"""
Image-source shoebox simulator and synthetic corpus writer.

The room occupies ``[0, Lx] x [0, Ly] x [0, Lz]``. Walls are ordered
``(x=0, x=Lx, y=0, y=Ly, z=0, z=Lz)``.

Frequency-dependent absorption: the image-source sum is run once with the
band-averaged absorption (``h_ref``) and once per band; the output is
``h_ref + sum_b bandpass_b(h_b - h_ref)``. With flat absorption every
difference vanishes and the result is the plain broadband image-source RIR.

All image amplitudes are positive, so the dense tail accumulates a slowly
decaying DC offset that lengthens the broadband decay. ``highpass_hz`` removes
it with a causal 2nd-order Butterworth high-pass; corpora use 10 Hz.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from scipy import signal

from .errors import CoincidentEndpoints, IoError, OutOfRoom
from .rir import BandSpec, ImpulseResponse, band_filter, write_wav

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class ShoeboxRoom:
    dims: np.ndarray
    absorption: np.ndarray  # (6, B)
    sample_rate: int = 16000
    speed_of_sound: float = SPEED_OF_SOUND
    bands: BandSpec = field(default_factory=BandSpec)

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        a = np.asarray(self.absorption, dtype=np.float64)
        if a.ndim == 0:
            a = np.full((6, len(self.bands)), float(a))
        elif a.ndim == 1:
            a = np.repeat(a.reshape(6, 1), len(self.bands), axis=1) if a.size == 6 else np.tile(a, (6, 1))
        if a.shape != (6, len(self.bands)):
            raise ValueError(f"absorption must have shape (6, {len(self.bands)}), got {a.shape}")
        if np.any(dims <= 0):
            raise ValueError("room dimensions must be positive")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("absorption coefficients must lie in (0, 1]")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "absorption", a)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return float(2 * (x * y + x * z + y * z))

    def wall_areas(self) -> np.ndarray:
        x, y, z = self.dims
        return np.array([y * z, y * z, x * z, x * z, x * y, x * y])

    def sabine_rt60(self) -> float:
        """Sabine estimate from the area-weighted, band-averaged absorption."""
        alpha = (self.wall_areas() * self.absorption.mean(axis=1)).sum() / self.surface
        return 0.161 * self.volume / (self.surface * alpha)


def _axis_images(src: float, length: float, max_order: int, beta_lo: np.ndarray, beta_hi: np.ndarray):
    """Image coordinates along one axis with their reflection counts and gains."""
    coords, orders, gains = [], [], []
    for n in range(-max_order, max_order + 1):
        for q in (0, 1):
            n_lo, n_hi = abs(n - q), abs(n)
            if n_lo + n_hi > max_order:
                continue
            coords.append((1 - 2 * q) * src + 2 * n * length)
            orders.append(n_lo + n_hi)
            gains.append(beta_lo**n_lo * beta_hi**n_hi)
    return np.array(coords), np.array(orders), np.array(gains)


def _check_inside(room: ShoeboxRoom, p: np.ndarray, name: str) -> None:
    if not (np.all(p > 0) and np.all(p < room.dims)):
        raise OutOfRoom(f"{name} {p.tolist()} is not strictly inside room {room.dims.tolist()}")


def image_source_rir(
    room: ShoeboxRoom,
    src,
    rcv,
    max_order: int,
    length_s: float,
    highpass_hz: float | None = None,
) -> ImpulseResponse:
    """
    Shoebox RIR by the image-source method.

    Every image up to reflection order ``max_order`` whose path fits in
    ``length_s`` contributes ``prod(reflection coefficients) / distance`` at
    delay ``distance / c``, spread over two samples by linear interpolation.
    Reflection coefficient per wall is ``sqrt(1 - absorption)``.

    ``highpass_hz`` (optional) applies a DC-blocking high-pass to the result.
    """
    src = np.asarray(src, dtype=np.float64).reshape(3)
    rcv = np.asarray(rcv, dtype=np.float64).reshape(3)
    _check_inside(room, src, "source")
    _check_inside(room, rcv, "receiver")
    if np.allclose(src, rcv, rtol=0.0, atol=1e-9):
        raise CoincidentEndpoints("source and receiver coincide")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    fs = room.sample_rate
    if highpass_hz is not None and not 0 < highpass_hz < fs / 2:
        raise ValueError("highpass_hz must lie in (0, fs/2)")
    n = int(round(length_s * fs))
    if n < 2:
        raise ValueError("length_s too short")

    beta = np.sqrt(1.0 - room.absorption)  # (6, B)
    beta_ref = np.sqrt(1.0 - room.absorption.mean(axis=1))  # (6,)
    # columns: band-averaged reference, then one per band
    beta_all = np.concatenate([beta_ref[:, None], beta], axis=1)
    max_dist = (n - 1) / fs * room.speed_of_sound

    axes = [
        _axis_images(src[a], room.dims[a], max_order, beta_all[2 * a], beta_all[2 * a + 1])
        for a in range(3)
    ]
    (xc, xo, xg), (yc, yo, yg), (zc, zo, zg) = axes
    out = np.zeros((beta_all.shape[1], n + 1))
    dy2 = (yc - rcv[1]) ** 2
    dz2 = (zc - rcv[2]) ** 2
    for i in range(xc.size):
        order = xo[i] + yo[:, None] + zo[None, :]
        dist = np.sqrt((xc[i] - rcv[0]) ** 2 + dy2[:, None] + dz2[None, :])
        keep = (order <= max_order) & (dist <= max_dist)
        if not keep.any():
            continue
        iy, iz = np.nonzero(keep)
        d = dist[iy, iz]
        gain = xg[i][None, :] * yg[iy] * zg[iz]  # (M, B+1)
        amp = gain / d[:, None]
        t = d / room.speed_of_sound * fs
        k = np.floor(t).astype(np.int64)
        frac = t - k
        for col in range(out.shape[0]):
            out[col] += np.bincount(k, weights=amp[:, col] * (1.0 - frac), minlength=n + 1)[: n + 1]
            out[col] += np.bincount(k + 1, weights=amp[:, col] * frac, minlength=n + 2)[: n + 1]
    h_ref = out[0, :n]
    h = h_ref.copy()
    for b, center in enumerate(room.bands.centers):
        diff = out[b + 1, :n] - h_ref
        if np.any(diff != 0.0):
            h += band_filter(ImpulseResponse(diff, fs), center).samples
    if highpass_hz is not None:
        h = signal.sosfilt(signal.butter(2, highpass_hz, btype="highpass", fs=fs, output="sos"), h)
    return ImpulseResponse(h, fs)


# --- corpus generation ------------------------------------------------------


@dataclass
class CorpusRecipe:
    """How to draw a synthetic room corpus."""

    rooms: int = 20
    pairs_per_room: int = 10
    dims_min: tuple = (3.0, 3.0, 2.4)
    dims_max: tuple = (8.0, 7.0, 4.0)
    absorption_min: float = 0.2
    absorption_max: float = 0.7
    # per-band log-slope range of absorption across the band layout
    absorption_tilt: float = 0.6
    # per-wall multiplicative jitter
    wall_jitter: float = 0.2
    sample_rate: int = 16000
    length_s: float = 0.6
    max_order: int = 40
    # DC-blocking high-pass applied to every RIR; None disables it
    highpass_hz: float | None = 10.0
    wall_margin: float = 0.5
    min_distance: float = 0.8
    band_centers: tuple = BandSpec().centers
    room_prefix: str = "room"

    @property
    def bands(self) -> BandSpec:
        return BandSpec(tuple(self.band_centers))

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusRecipe":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("dims_min", "dims_max", "band_centers"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass
class RoomEntry:
    room_id: str
    bbox: list
    mesh_path: str | None = None
    dims: list | None = None
    absorption: list | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class RirEntry:
    rir_id: str
    room_id: str
    wav_path: str
    src: list
    rcv: list
    sample_rate: int

    def to_json(self) -> dict:
        return asdict(self)


def draw_room(recipe: CorpusRecipe, seed: int, index: int) -> ShoeboxRoom:
    rng = np.random.default_rng([seed, index])
    dims = rng.uniform(recipe.dims_min, recipe.dims_max)
    bands = recipe.bands
    nb = len(bands)
    base = np.exp(rng.uniform(np.log(recipe.absorption_min), np.log(recipe.absorption_max)))
    tilt = rng.uniform(-recipe.absorption_tilt, recipe.absorption_tilt)
    pos = (np.arange(nb) - (nb - 1) / 2.0) / max(nb - 1, 1)
    jitter = rng.uniform(1 - recipe.wall_jitter, 1 + recipe.wall_jitter, size=(6, 1))
    absorption = np.clip(base * np.exp(tilt * pos)[None, :] * jitter, 0.02, 0.95)
    return ShoeboxRoom(dims, absorption, recipe.sample_rate, bands=bands)


def draw_pair(room: ShoeboxRoom, recipe: CorpusRecipe, seed: int, room_index: int, pair_index: int):
    rng = np.random.default_rng([seed, room_index, pair_index + 1])
    margin = np.minimum(recipe.wall_margin, room.dims / 4)
    for _ in range(1000):
        src = rng.uniform(margin, room.dims - margin)
        rcv = rng.uniform(margin, room.dims - margin)
        if np.linalg.norm(src - rcv) >= recipe.min_distance:
            return src, rcv
    raise ValueError("could not place a source/receiver pair; room too small for min_distance")


def generate_corpus(recipe: CorpusRecipe, seed: int, out_dir: str | Path) -> tuple[list[RoomEntry], list[RirEntry]]:
    """
    Simulate ``recipe.rooms x recipe.pairs_per_room`` RIRs into ``out_dir``.

    Writes ``wavs/<rir_id>.wav``, ``manifest.jsonl`` and ``rooms.jsonl``. Every
    record depends only on ``seed`` and its (room, pair) index.
    """
    out = Path(out_dir)
    try:
        (out / "wavs").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out}: {e}") from e
    rooms: list[RoomEntry] = []
    records: list[RirEntry] = []
    width = max(3, len(str(recipe.rooms - 1)))
    for r in range(recipe.rooms):
        room = draw_room(recipe, seed, r)
        room_id = f"{recipe.room_prefix}{r:0{width}d}"
        rooms.append(
            RoomEntry(
                room_id,
                [[0.0, 0.0, 0.0], room.dims.tolist()],
                dims=room.dims.tolist(),
                absorption=room.absorption.tolist(),
            )
        )
        for j in range(recipe.pairs_per_room):
            src, rcv = draw_pair(room, recipe, seed, r, j)
            ir = image_source_rir(room, src, rcv, recipe.max_order, recipe.length_s, recipe.highpass_hz)
            rir_id = f"{room_id}_p{j:03d}"
            rel = f"wavs/{rir_id}.wav"
            try:
                write_wav(out / rel, ir)
            except OSError as e:
                raise IoError(f"cannot write {out / rel}: {e}") from e
            records.append(RirEntry(rir_id, room_id, rel, src.tolist(), rcv.tolist(), ir.sample_rate))
        logger.info("simulated %s (%d pairs)", room_id, recipe.pairs_per_room)
    write_jsonl(out / "rooms.jsonl", [r.to_json() for r in rooms])
    write_jsonl(out / "manifest.jsonl", [r.to_json() for r in records])
    return rooms, records


def write_jsonl(path: str | Path, rows) -> None:
    try:
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_jsonl(path: str | Path) -> list[dict]:
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
