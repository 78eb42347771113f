"""Foreground region selection.

Median-rank sampling picks the regions whose point counts are closest to the
lower-median count (background planes are huge, noise blobs are tiny, objects
sit in the middle). Prompted selection first filters regions by an external
per-region foreground score, then applies median-rank sampling inside the
surviving candidates; with threshold 0 it reduces exactly to median sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from fgcontrast.errors import ArgumentError, DataError
from fgcontrast.overseg import RegionStats, Segmentation, region_members
from fgcontrast.scene import PointCloud


@dataclass(frozen=True)
class RegionSelection:
    region_ids: np.ndarray
    requested: int

    def __post_init__(self):
        ids = np.asarray(self.region_ids, dtype=np.int64)
        if len(set(ids.tolist())) != len(ids):
            raise ArgumentError("selected region ids must be distinct")
        object.__setattr__(self, "region_ids", ids)


class ForegroundScorer(Protocol):
    """Maps (cloud, segmentation) to per-region scores in [0, 1]."""

    def __call__(self, cloud: PointCloud, seg: Segmentation) -> np.ndarray: ...


def sample_median_regions(stats: RegionStats, h: int) -> RegionSelection:
    """The min(h, I) regions with counts closest to the lower median count.

    Ties break toward the smaller |count - median|, then the smaller region id.
    """
    if h < 1:
        raise ArgumentError("H must be >= 1")
    counts = np.asarray(stats.counts, dtype=np.int64)
    order = _median_order(counts)
    return RegionSelection(region_ids=order[: min(h, len(counts))], requested=h)


def _median_order(counts: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Region ids sorted by |count - lower median|, ties by smaller id."""
    if ids is None:
        ids = np.arange(len(counts), dtype=np.int64)
    med = np.sort(counts)[(len(counts) - 1) // 2]
    dist = np.abs(counts - med)
    return ids[np.lexsort((ids, dist))]


def heuristic_scorer(cloud: PointCloud, seg: Segmentation) -> np.ndarray:
    """Bundled geometry-only foreground score: (1 - planarity) * height_term.

    planarity is the eigenvalue feature (l2 - l3) / l1 (1 for planes, ~0 for
    compact shapes); height_term = 4 z (1 - z) on the region centroid's
    relative height, zero at floor and ceiling height.
    """
    pos = cloud.positions
    z_lo, z_hi = float(pos[:, 2].min()), float(pos[:, 2].max())
    z_span = max(z_hi - z_lo, 1e-12)
    scores = np.zeros(seg.n_regions)
    for r, members in enumerate(region_members(seg)):
        pts = pos[members]
        centered = pts - pts.mean(axis=0)
        lam = np.linalg.eigvalsh(centered.T @ centered / max(len(pts), 1))[::-1]
        planarity = float((lam[1] - lam[2]) / max(lam[0], 1e-18)) if len(pts) >= 3 else 1.0
        planarity = min(max(planarity, 0.0), 1.0)
        z_rel = (float(pts[:, 2].mean()) - z_lo) / z_span
        height_term = min(max(4.0 * z_rel * (1.0 - z_rel), 0.0), 1.0)
        scores[r] = (1.0 - planarity) * height_term
    return scores


def file_scorer(path) -> Callable[[PointCloud, Segmentation], np.ndarray]:
    """Scorer that returns precomputed scores from a sidecar verbatim.

    Sidecar format: one "region_id score" pair per line.
    """

    def score(cloud: PointCloud, seg: Segmentation) -> np.ndarray:
        scores = np.full(seg.n_regions, np.nan)
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise DataError(f"score sidecar line {lineno}: expected 'id score'")
                rid, val = int(parts[0]), float(parts[1])
                if not 0 <= rid < seg.n_regions:
                    raise DataError(f"score sidecar line {lineno}: bad region id {rid}")
                scores[rid] = val
        if np.any(np.isnan(scores)):
            raise DataError("score sidecar is missing regions")
        return scores

    return score


def score_foreground(
    scorer: Callable[[PointCloud, Segmentation], np.ndarray],
    cloud: PointCloud,
    seg: Segmentation,
) -> np.ndarray:
    """Run a scorer and validate its output contract."""
    scores = np.asarray(scorer(cloud, seg), dtype=np.float64)
    if scores.shape != (seg.n_regions,):
        raise DataError(f"scorer returned shape {scores.shape}, want ({seg.n_regions},)")
    if not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1:
        raise DataError("scores must be finite and in [0, 1]")
    return scores


def select_prompted_regions(
    scores: np.ndarray, stats: RegionStats, h: int, threshold: float
) -> RegionSelection:
    """Filter regions by score >= threshold, median-rank inside the survivors,
    then fill any shortfall from the filtered-out rest by descending score."""
    if h < 1:
        raise ArgumentError("H must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    counts = np.asarray(stats.counts, dtype=np.int64)
    if len(scores) != len(counts):
        raise ArgumentError("scores and stats disagree on region count")
    ids = np.arange(len(counts), dtype=np.int64)
    cand = ids[scores >= threshold]
    chosen: list[int] = []
    if len(cand):
        chosen.extend(_median_order(counts[cand], cand)[: min(h, len(cand))].tolist())
    if len(chosen) < min(h, len(counts)):
        rest = ids[scores < threshold]
        refill = rest[np.lexsort((rest, -scores[rest]))]
        chosen.extend(refill[: min(h, len(counts)) - len(chosen)].tolist())
    return RegionSelection(region_ids=np.array(chosen, dtype=np.int64), requested=h)
