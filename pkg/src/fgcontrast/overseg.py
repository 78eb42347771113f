"""Unsupervised over-segmentation: normal-guided region growing on a voxel
grid, plus per-region statistics.

Regions are grown point by point through 26-adjacent voxels; a point joins a
region while its normal stays within max_normal_angle of the region's running
mean normal. Undersized regions are merged into their most similar adjacent
region. Everything is deterministic: seeds are visited in ascending
(voxel index, point index) order and ties break toward smaller region ids.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from fgcontrast.errors import ArgumentError, ContractError, DataError, FormatError
from fgcontrast.scene import PointCloud, voxel_indices

SEG_MAGIC = b"FACSG1"

_NEIGHBOR_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class OversegParams:
    voxel_size: float = 0.05
    normal_k: int = 10
    max_normal_angle_deg: float = 15.0
    min_region_points: int = 10

    def __post_init__(self):
        if self.voxel_size <= 0 or self.normal_k <= 0 or self.min_region_points <= 0:
            raise ArgumentError("overseg params must be positive")
        if not 0.0 < self.max_normal_angle_deg <= 90.0:
            raise ArgumentError("max_normal_angle_deg must be in (0, 90]")


@dataclass(frozen=True)
class Segmentation:
    """Per-point region ids forming a partition with ids 0..n_regions-1."""

    region_of: np.ndarray
    n_regions: int

    def __post_init__(self):
        ids = np.asarray(self.region_of, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise DataError("region_of must be a nonempty 1-d array")
        if self.n_regions < 1:
            raise DataError("n_regions must be >= 1")
        counts = np.bincount(ids, minlength=self.n_regions)
        if ids.min() < 0 or ids.max() >= self.n_regions or np.any(counts == 0):
            raise DataError("region ids must cover 0..n_regions-1 with no empty region")
        ids = np.ascontiguousarray(ids)
        ids.flags.writeable = False
        object.__setattr__(self, "region_of", ids)


@dataclass(frozen=True)
class RegionStats:
    counts: np.ndarray
    centroids: np.ndarray
    mean_normals: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.counts)


def estimate_normals(positions: np.ndarray, k: int) -> np.ndarray:
    """Unit normals from PCA over each point's k nearest neighbors (self
    included), oriented into a consistent hemisphere (first nonzero of
    (z, y, x) made positive)."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < k:
        raise ArgumentError(f"need at least {k} points for normal estimation")
    tree = cKDTree(pos)
    _, idx = tree.query(pos, k=k)
    if k == 1:
        idx = idx[:, None]
    nbrs = pos[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    # hemisphere disambiguation: first non-negligible of (z, y, x) made positive
    undecided = np.ones(n, dtype=bool)
    for comp in (2, 1, 0):
        decisive = undecided & (np.abs(normals[:, comp]) > 1e-12)
        normals[decisive & (normals[:, comp] < 0)] *= -1.0
        undecided &= ~decisive
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norms, 1e-300)


def oversegment(cloud: PointCloud, params: OversegParams) -> Segmentation:
    n = cloud.n
    if n < params.normal_k:
        raise ArgumentError("fewer points than normal_k")
    normals = estimate_normals(cloud.positions, params.normal_k)
    vox = voxel_indices(cloud.positions, params.voxel_size)
    cell_of_point = [tuple(v) for v in vox]
    cells: dict = {}
    for p, key in enumerate(cell_of_point):
        cells.setdefault(key, []).append(p)

    cos_thresh = np.cos(np.radians(params.max_normal_angle_deg))
    region_of = np.full(n, -1, dtype=np.int64)
    region_sums: list[np.ndarray] = []
    region_counts: list[int] = []

    seed_order = sorted(range(n), key=lambda p: (cell_of_point[p], p))
    for seed in seed_order:
        if region_of[seed] >= 0:
            continue
        rid = len(region_sums)
        region_of[seed] = rid
        mean = normals[seed].copy()
        total = normals[seed].copy()
        count = 1
        frontier = deque([cell_of_point[seed]])
        seen_cells = {cell_of_point[seed]}
        while frontier:
            cell = frontier.popleft()
            grew = False
            for p in cells.get(cell, ()):
                if region_of[p] >= 0:
                    continue
                if float(normals[p] @ mean) >= cos_thresh:
                    region_of[p] = rid
                    total += normals[p]
                    count += 1
                    nrm = np.linalg.norm(total)
                    mean = total / nrm if nrm > 1e-300 else mean
                    grew = True
            if grew or cell == cell_of_point[seed]:
                base = np.array(cell, dtype=np.int64)
                for off in _NEIGHBOR_OFFSETS:
                    nb = tuple(base + off)
                    if nb in cells and nb not in seen_cells:
                        seen_cells.add(nb)
                        frontier.append(nb)
        region_sums.append(total)
        region_counts.append(count)

    region_of, n_regions = _merge_small_regions(
        region_of,
        np.array(region_counts, dtype=np.int64),
        np.array(region_sums, dtype=np.float64),
        cells,
        params.min_region_points,
    )
    return Segmentation(region_of=region_of, n_regions=n_regions)


def _region_adjacency(region_of: np.ndarray, cells: dict) -> dict:
    """Region pairs sharing a voxel or a 26-neighbor voxel pair."""
    adj: dict = {}
    keys = set(cells)
    for cell, pts in cells.items():
        here = {int(region_of[p]) for p in pts}
        base = np.array(cell, dtype=np.int64)
        there = set(here)
        for off in _NEIGHBOR_OFFSETS:
            nb = tuple(base + off)
            if nb in keys:
                there.update(int(region_of[p]) for p in cells[nb])
        for r in here:
            adj.setdefault(r, set()).update(there - {r})
    return adj


def _merge_small_regions(region_of, counts, normal_sums, cells, min_points):
    n_regions = len(counts)
    parent = list(range(n_regions))

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    adj = _region_adjacency(region_of, cells)
    means = normal_sums / np.maximum(np.linalg.norm(normal_sums, axis=1, keepdims=True), 1e-300)
    sizes = counts.astype(np.int64).copy()

    for r in range(n_regions):
        if sizes[find(r)] >= min_points or find(r) != r:
            continue
        candidates = sorted({find(x) for x in adj.get(r, ())} - {r})
        if not candidates:
            continue
        sims = [float(means[r] @ means[c]) for c in candidates]
        best = candidates[int(np.lexsort((candidates, -np.asarray(sims)))[0])]
        parent[r] = best
        sizes[best] += sizes[r]

    roots = sorted({find(r) for r in range(n_regions)})
    relabel = {root: i for i, root in enumerate(roots)}
    new_ids = np.array([relabel[find(int(r))] for r in region_of], dtype=np.int64)
    return new_ids, len(roots)


def region_stats(cloud: PointCloud, seg: Segmentation, normal_k: int = 10) -> RegionStats:
    """Counts, centroids, and unit mean normals per region."""
    ids = seg.region_of
    if len(ids) != cloud.n:
        raise ArgumentError("segmentation length does not match cloud")
    counts = np.bincount(ids, minlength=seg.n_regions)
    if np.any(counts == 0):
        raise ContractError("segmentation has an empty region")
    centroids = np.zeros((seg.n_regions, 3))
    np.add.at(centroids, ids, cloud.positions)
    centroids /= counts[:, None]
    normals = estimate_normals(cloud.positions, min(normal_k, cloud.n))
    sums = np.zeros((seg.n_regions, 3))
    np.add.at(sums, ids, normals)
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    mean_normals = np.where(norms > 1e-12, sums / np.maximum(norms, 1e-300), [0.0, 0.0, 1.0])
    return RegionStats(counts=counts, centroids=centroids, mean_normals=mean_normals)


def region_members(seg: Segmentation) -> list:
    """Point indices per region id."""
    order = np.argsort(seg.region_of, kind="stable")
    bounds = np.searchsorted(seg.region_of[order], np.arange(seg.n_regions + 1))
    return [order[bounds[r] : bounds[r + 1]] for r in range(seg.n_regions)]


def write_segmentation(seg: Segmentation, path) -> None:
    with open(path, "wb") as f:
        f.write(SEG_MAGIC)
        f.write(struct.pack("<Q", len(seg.region_of)))
        f.write(seg.region_of.astype("<u4").tobytes())


def read_segmentation(path) -> Segmentation:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:6] != SEG_MAGIC:
        raise FormatError("bad segmentation header")
    (n,) = struct.unpack("<Q", blob[6:14])
    if n == 0 or len(blob) < 14 + 4 * n:
        raise DataError("truncated segmentation payload")
    ids = np.frombuffer(blob, dtype="<u4", count=n, offset=14).astype(np.int64)
    return Segmentation(region_of=ids, n_regions=int(ids.max()) + 1)
