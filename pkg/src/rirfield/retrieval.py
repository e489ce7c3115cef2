"""
RT60-fingerprint retrieval over an RIR corpus.

Each corpus RIR is keyed by its multi-band RT60. For every enrollment RIR of a
target room the ``M`` nearest corpus RIRs (Euclidean distance, exact scan) are
retrieved; the rooms they come from are then ranked by how often they appear.
"""
from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyIndex,
    InsufficientDecay,
    IoError,
    NoGeometryAvailable,
    NotEnoughRooms,
    ZeroEnergy,
)
from .rir import BandSpec, Rt60Fingerprint, multiband_rt60, read_wav

logger = logging.getLogger(__name__)

SIDECAR_MAGIC = b"RTIX"
SIDECAR_VERSION = 1


@dataclass(frozen=True)
class RirRecord:
    rir_id: str
    room_id: str
    src: tuple
    rcv: tuple
    fingerprint: Rt60Fingerprint


@dataclass(frozen=True)
class RankedRoom:
    room_id: str
    frequency_count: int
    best_distance: float


class RetrievalIndex:
    """Immutable exact-search index of RT60 fingerprints."""

    def __init__(self, records: Sequence[RirRecord], bands: BandSpec, skipped: int = 0):
        if not records:
            raise EmptyIndex("index needs at least one record")
        ids = [r.rir_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("rir ids must be unique within an index")
        b = len(bands)
        for r in records:
            if len(r.fingerprint) != b:
                raise DimensionMismatch(f"{r.rir_id}: fingerprint has {len(r.fingerprint)} bands, index has {b}")
        self._records = tuple(records)
        self.bands = bands
        self.skipped = skipped
        self._matrix = np.stack([r.fingerprint.rt60_s for r in records])
        self._matrix.setflags(write=False)
        # rank of each id in lexicographic order, for tie-breaking
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    @property
    def records(self) -> tuple[RirRecord, ...]:
        return self._records

    @property
    def fingerprints(self) -> np.ndarray:
        return self._matrix

    def __len__(self):
        return len(self._records)

    def room_ids(self) -> list[str]:
        return sorted({r.room_id for r in self._records})


def build_index(manifest: Sequence[dict], bands: BandSpec | None = None, root: str | Path = ".") -> RetrievalIndex:
    """
    Fingerprint every manifest row.

    Rows whose RIR cannot be fingerprinted are skipped and counted in
    ``index.skipped``; an unreadable WAV is an ``IoError``.
    """
    bands = bands or BandSpec()
    root = Path(root)
    records = []
    skipped = 0
    for row in manifest:
        path = Path(row["wav_path"])
        if not path.is_absolute():
            path = root / path
        try:
            ir = read_wav(path)
        except (OSError, ValueError) as e:
            raise IoError(f"rir {row['rir_id']}: cannot read {path}: {e}") from e
        try:
            fp = multiband_rt60(ir, bands)
        except (InsufficientDecay, ZeroEnergy) as e:
            skipped += 1
            logger.warning("rir %s skipped: %s", row["rir_id"], e)
            continue
        records.append(RirRecord(row["rir_id"], row["room_id"], tuple(row["src"]), tuple(row["rcv"]), fp))
    if not records:
        raise EmptyIndex("no fingerprintable records in manifest")
    if skipped:
        logger.warning("%d manifest rows skipped during index build", skipped)
    return RetrievalIndex(records, bands, skipped)


def _check_query(index: RetrievalIndex, q) -> np.ndarray:
    q = np.asarray(getattr(q, "rt60_s", q), dtype=np.float64).reshape(-1)
    if q.size != len(index.bands):
        raise DimensionMismatch(f"query has {q.size} bands, index has {len(index.bands)}")
    return q


def query_nearest(index: RetrievalIndex, q, m: int) -> list[tuple[RirRecord, float]]:
    """``min(m, len(index))`` records by ascending L2 distance; ties broken by rir_id."""
    if m < 1:
        raise ValueError("m must be >= 1")
    q = _check_query(index, q)
    dist = np.sqrt(((index.fingerprints - q) ** 2).sum(axis=1))
    order = np.lexsort((index._id_rank, dist))[: min(m, len(index))]
    return [(index.records[i], float(dist[i])) for i in order]


def rank_rooms(index: RetrievalIndex, enrollment: Sequence, m: int) -> list[RankedRoom]:
    """
    Rank rooms by how often they occur among the ``N x m`` retrieved RIRs.

    Counts include multiplicity across queries. Order: count descending, best
    distance ascending, room id ascending.
    """
    if len(enrollment) == 0:
        raise ValueError("enrollment must be non-empty")
    counts: dict[str, int] = defaultdict(int)
    best: dict[str, float] = {}
    for q in enrollment:
        for rec, d in query_nearest(index, q, m):
            counts[rec.room_id] += 1
            best[rec.room_id] = min(d, best.get(rec.room_id, np.inf))
    ranking = [RankedRoom(rid, counts[rid], best[rid]) for rid in counts]
    ranking.sort(key=lambda r: (-r.frequency_count, r.best_distance, r.room_id))
    return ranking


def select_pretraining_rooms(ranking: Sequence[RankedRoom], limit: int = 100) -> list[str]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    return [r.room_id for r in ranking[:limit]]


def select_random_rooms(index: RetrievalIndex, count: int, seed: int) -> list[str]:
    rooms = index.room_ids()
    if count > len(rooms):
        raise NotEnoughRooms(f"asked for {count} rooms, index has {len(rooms)}")
    pick = np.random.default_rng(seed).permutation(len(rooms))[:count]
    return [rooms[i] for i in pick]


def retrieve_geometry(ranking: Sequence[RankedRoom], room_table: dict[str, dict]) -> tuple[str, dict]:
    """
    Geometry of the best-ranked room that declares any (mesh or bounding box).

    ``room_table`` maps room ids to room-table rows.
    """
    for r in ranking:
        row = room_table.get(r.room_id)
        if row and (row.get("mesh_path") or row.get("bbox")):
            return r.room_id, row
    raise NoGeometryAvailable("no ranked room has a mesh or bounding box")


# --- sidecar ----------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_index(path: str | Path, index: RetrievalIndex) -> None:
    """Little-endian ``RTIX`` sidecar; band centers follow the header."""
    b = len(index.bands)
    parts = [
        SIDECAR_MAGIC,
        struct.pack("<IIQ", SIDECAR_VERSION, b, len(index)),
        struct.pack(f"<{b}d", *index.bands.centers),
    ]
    for r in index.records:
        parts += [
            _pack_str(r.rir_id),
            _pack_str(r.room_id),
            struct.pack("<6d", *r.src, *r.rcv),
            struct.pack(f"<{b}d", *r.fingerprint.rt60_s),
        ]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as e:
        raise IoError(f"cannot write index {path}: {e}") from e


def load_index(path: str | Path) -> RetrievalIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read index {path}: {e}") from e
    if data[:4] != SIDECAR_MAGIC:
        raise IoError(f"{path} is not an RTIX index")
    version, b, count = struct.unpack_from("<IIQ", data, 4)
    if version != SIDECAR_VERSION:
        raise IoError(f"{path}: unsupported index version {version}")
    off = 4 + 16
    centers = struct.unpack_from(f"<{b}d", data, off)
    off += 8 * b

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        s = data[off : off + n].decode("utf-8")
        off += n
        return s

    records = []
    for _ in range(count):
        rid = read_str()
        room = read_str()
        pos = struct.unpack_from("<6d", data, off)
        off += 48
        fp = struct.unpack_from(f"<{b}d", data, off)
        off += 8 * b
        records.append(RirRecord(rid, room, tuple(pos[:3]), tuple(pos[3:]), Rt60Fingerprint(np.array(fp))))
    return RetrievalIndex(records, BandSpec(centers))


def write_ranking_csv(path: str | Path, ranking: Sequence[RankedRoom]) -> None:
    with open(path, "w") as fh:
        fh.write("rank,room_id,frequency_count,best_distance\n")
        for i, r in enumerate(ranking, 1):
            fh.write(f"{i},{r.room_id},{r.frequency_count},{r.best_distance:.9f}\n")
