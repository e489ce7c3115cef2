"""
Room geometry: OBJ meshes, bounding boxes and Poisson-disk bounce points.

Bounce points are drawn by sample elimination: oversample the surface with
area-weighted uniform candidates, then repeatedly drop the candidate with the
highest local density until exactly ``k`` remain.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, InfeasibleSampleCount, MalformedMesh

CANDIDATE_FACTOR = 8
ELIMINATION_ALPHA = 8.0


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.shape[0] == 0:
            raise EmptyMesh("mesh has no triangles")
        if not np.all(np.isfinite(v)):
            raise MalformedMesh("non-finite vertex coordinates")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise MalformedMesh("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.area <= 0.0:
            raise MalformedMesh("mesh has zero surface area")

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    @property
    def face_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())


@dataclass(frozen=True)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("min_corner must not exceed max_corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    def to_list(self) -> list[list[float]]:
        return [self.min_corner.tolist(), self.max_corner.tolist()]

    @classmethod
    def from_list(cls, pair) -> "BoundingBox":
        return cls(np.asarray(pair[0], float), np.asarray(pair[1], float))

    def normalize(self, p) -> np.ndarray:
        """Map points inside the box to [-1, 1] per axis."""
        ext = np.where(self.extent > 0, self.extent, 1.0)
        return 2.0 * (np.asarray(p, dtype=np.float64) - self.min_corner) / ext - 1.0


@dataclass(frozen=True)
class BouncePointSet:
    points: np.ndarray  # (K, 3)
    source_mesh_id: str
    radius: float
    seed: int = 0

    def __len__(self):
        return self.points.shape[0]


def load_obj(path: str | Path) -> TriangleMesh:
    """Parse ``v`` and ``f`` records of a Wavefront OBJ; polygons are fan-triangulated."""
    verts: list[list[float]] = []
    tris: list[tuple[int, int, int]] = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise MalformedMesh(f"cannot read {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    # negative indices count back from the latest vertex
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                for j in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[j], idx[j + 1]))
        except ValueError as e:
            raise MalformedMesh(f"{path}:{lineno}: {e}") from e
    if not tris:
        raise EmptyMesh(f"{path} contains no faces")
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64))


def save_obj(path: str | Path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices.tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def bounding_box(mesh: TriangleMesh) -> BoundingBox:
    return BoundingBox(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))


def contains(box: BoundingBox, p) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(box.min_corner <= p) and np.all(p <= box.max_corner))


def box_mesh(box: BoundingBox) -> TriangleMesh:
    """Closed 12-triangle mesh of an axis-aligned box, normals pointing outward."""
    lo, hi = box.min_corner, box.max_corner
    v = np.array(
        [[(hi if (i >> a) & 1 else lo)[a] for a in range(3)] for i in range(8)],
        dtype=np.float64,
    )
    quads = [
        (0, 4, 6, 2),  # x = lo
        (1, 3, 7, 5),  # x = hi
        (0, 1, 5, 4),  # y = lo
        (2, 6, 7, 3),  # y = hi
        (0, 2, 3, 1),  # z = lo
        (4, 5, 7, 6),  # z = hi
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Area-weighted uniform surface samples.

    Returns
    -------
    points : (count, 3)
    face_index : (count,) triangle each point was drawn from
    """
    areas = mesh.face_areas
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.random(count) * cum[-1], side="right")
    face = np.minimum(face, len(areas) - 1)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    c = mesh.corners[face]
    pts = c[:, 0] + uv[:, :1] * (c[:, 1] - c[:, 0]) + uv[:, 1:] * (c[:, 2] - c[:, 0])
    return pts, face


def max_poisson_radius(area: float, k: int) -> float:
    """Disk radius of a hexagonal packing of ``k`` points over ``area``."""
    return float(np.sqrt(area / (2.0 * np.sqrt(3.0) * k)))


def eliminate_samples(candidates: np.ndarray, k: int, r_max: float, alpha: float = ELIMINATION_ALPHA) -> np.ndarray:
    """
    Greedy weighted sample elimination down to ``k`` survivors.

    Each pair closer than ``2 r_max`` adds ``(1 - d / 2r_max) ** alpha`` to both
    points' weights; the heaviest point is removed and its neighbours' weights
    reduced. Ties go to the lower candidate index. Returns surviving indices in
    ascending order.
    """
    n = candidates.shape[0]
    if k > n:
        raise InfeasibleSampleCount(f"cannot keep {k} of {n} candidates")
    d_max = 2.0 * r_max
    tree = cKDTree(candidates)
    pairs = tree.query_pairs(d_max, output_type="ndarray")
    neighbours: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    weight = np.zeros(n)
    if pairs.size:
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        i, j = pairs[:, 0], pairs[:, 1]
        d = np.linalg.norm(candidates[i] - candidates[j], axis=1)
        w = (1.0 - d / d_max) ** alpha
        np.add.at(weight, i, w)
        np.add.at(weight, j, w)
        for a, b, ww in zip(i.tolist(), j.tolist(), w.tolist()):
            neighbours[a].append((b, ww))
            neighbours[b].append((a, ww))
    alive = np.ones(n, dtype=bool)
    heap = [(-weight[i], i) for i in range(n)]
    heapq.heapify(heap)
    remaining = n
    while remaining > k:
        neg_w, idx = heapq.heappop(heap)
        if not alive[idx] or -neg_w != weight[idx]:
            continue  # stale entry
        alive[idx] = False
        remaining -= 1
        for nb, ww in neighbours[idx]:
            if alive[nb]:
                weight[nb] -= ww
                heapq.heappush(heap, (-weight[nb], nb))
    return np.flatnonzero(alive)


def min_pairwise_distance(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return float("inf")
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].min())


def poisson_disk_sample(mesh: TriangleMesh, k: int, seed: int = 0, mesh_id: str = "") -> BouncePointSet:
    """Exactly ``k`` evenly spread surface points, deterministic in ``(mesh, k, seed)``."""
    if k < 1:
        raise InfeasibleSampleCount("k must be at least 1")
    rng = np.random.default_rng(seed)
    cands, _ = sample_surface(mesh, CANDIDATE_FACTOR * k, rng)
    keep = eliminate_samples(cands, k, max_poisson_radius(mesh.area, k))
    pts = cands[keep]
    return BouncePointSet(pts, mesh_id, min_pairwise_distance(pts), seed)


def write_bounce_csv(path: str | Path, bps: BouncePointSet) -> None:
    with open(path, "w") as fh:
        fh.write(f"# K={len(bps)} seed={bps.seed}\n")
        fh.write("x,y,z\n")
        for p in bps.points.tolist():
            fh.write(f"{p[0]!r},{p[1]!r},{p[2]!r}\n")


def read_bounce_csv(path: str | Path, mesh_id: str = "") -> BouncePointSet:
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(tok.split("=", 1) for tok in header)
        fh.readline()
        pts = np.loadtxt(fh, delimiter=",", ndmin=2)
    if pts.shape[0] != int(meta["K"]):
        raise MalformedMesh(f"{path}: header says K={meta['K']}, found {pts.shape[0]} rows")
    return BouncePointSet(pts, mesh_id, min_pairwise_distance(pts), int(meta["seed"]))
