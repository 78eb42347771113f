"""Dual-view augmentation with a guaranteed index-level overlap.

Each view is an independently transformed subsample of the source cloud; a
shared index set of exactly floor(overlap_ratio * n_sample) source points is
planted in both views, providing ground-truth correspondence for the losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fgcontrast.errors import ArgumentError
from fgcontrast.rng import rng_for
from fgcontrast.scene import PointCloud, SimilarityTransform, rotation_about_axis


@dataclass(frozen=True)
class AugmentConfig:
    n_sample: int = 2000
    overlap_ratio: float = 0.2
    rotation_range_deg: float = 180.0
    scale_range: tuple = (0.8, 1.2)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_sample < 1:
            raise ArgumentError("n_sample must be >= 1")
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise ArgumentError("overlap_ratio must be in (0, 1]")
        if math.floor(self.overlap_ratio * self.n_sample) < 1:
            raise ArgumentError("overlap_ratio * n_sample must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ArgumentError("flip_prob must be in [0, 1]")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ArgumentError("scale_range must be positive and ordered")


@dataclass(frozen=True)
class ViewPair:
    """Two augmented views plus their source indices and overlap pairs.

    overlap[(i_a, i_b)] satisfies source_index_a[i_a] == source_index_b[i_b].
    """

    view_a: PointCloud
    view_b: PointCloud
    source_index_a: np.ndarray
    source_index_b: np.ndarray
    overlap: np.ndarray
    transform_a: SimilarityTransform
    transform_b: SimilarityTransform


def sample_transform(rng: np.random.Generator, cfg: AugmentConfig) -> SimilarityTransform:
    """Rotation about a uniform random axis, scale, per-axis flips. No translation."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg))
    rot = rotation_about_axis(axis, angle)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    flip_x = bool(rng.uniform() < cfg.flip_prob)
    flip_y = bool(rng.uniform() < cfg.flip_prob)
    return SimilarityTransform(rotation=rot, scale=scale, flip_x=flip_x, flip_y=flip_y)


def make_view_pair(cloud: PointCloud, cfg: AugmentConfig) -> ViewPair:
    """Deterministic in (cloud, cfg). Draw order: shared set, extras for view a,
    extras for view b, permutations, transform a, transform b."""
    n = cloud.n
    if n < cfg.n_sample:
        raise ArgumentError(f"cloud has {n} points, need >= {cfg.n_sample}")
    rng = rng_for(cfg.seed, 0xA06)
    n_ov = int(math.floor(cfg.overlap_ratio * cfg.n_sample))
    n_extra = cfg.n_sample - n_ov

    shared = rng.choice(n, size=n_ov, replace=False)
    mask = np.ones(n, dtype=bool)
    mask[shared] = False
    complement = np.flatnonzero(mask)
    extra_a = rng.choice(complement, size=n_extra, replace=False) if n_extra else np.empty(0, dtype=np.int64)
    extra_b = rng.choice(complement, size=n_extra, replace=False) if n_extra else np.empty(0, dtype=np.int64)

    src_a = np.concatenate([shared, extra_a]).astype(np.int64)
    src_b = np.concatenate([shared, extra_b]).astype(np.int64)
    perm_a = rng.permutation(cfg.n_sample)
    perm_b = rng.permutation(cfg.n_sample)
    src_a = src_a[perm_a]
    src_b = src_b[perm_b]

    # slot of each shared draw after permutation
    inv_a = np.argsort(perm_a, kind="stable")
    inv_b = np.argsort(perm_b, kind="stable")
    overlap = np.column_stack([inv_a[:n_ov], inv_b[:n_ov]]).astype(np.int64)

    t_a = sample_transform(rng, cfg)
    t_b = sample_transform(rng, cfg)
    base_a = cloud.subset(src_a)
    base_b = cloud.subset(src_b)
    view_a = PointCloud(t_a.apply(base_a.positions), base_a.colors, base_a.labels)
    view_b = PointCloud(t_b.apply(base_b.positions), base_b.colors, base_b.labels)
    return ViewPair(
        view_a=view_a,
        view_b=view_b,
        source_index_a=src_a,
        source_index_b=src_b,
        overlap=overlap,
        transform_a=t_a,
        transform_b=t_b,
    )
