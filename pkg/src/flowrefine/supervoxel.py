"""Geometry-driven partition of a cloud into compact regions (supervoxels).

Seeds come from farthest-point sampling, points are assigned by a combined
position/normal distance, and a few Lloyd iterations tighten the clusters.
Empty clusters are re-seeded from the point currently worst served, so every
region is non-empty by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NormalField, _as_points


@dataclass(frozen=True)
class SegmenterConfig:
    """Knobs for region size and the assignment metric.

    The region count is round(n / desired_point_count), at least 1. The
    assignment distance is position_weight * ||p - p_s|| +
    normal_weight * (1 - |n . n_s|).
    """

    desired_point_count: int = 140
    position_weight: float = 1.0
    normal_weight: float = 1.0
    lloyd_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.desired_point_count < 1:
            raise ValueError("desired_point_count must be >= 1")
        if self.position_weight < 0 or self.normal_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.position_weight == 0 and self.normal_weight == 0:
            raise ValueError("at least one weight must be positive")
        if self.lloyd_iterations < 1:
            raise ValueError("lloyd_iterations must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class SupervoxelPartition:
    """Disjoint cover of point indices by non-empty regions.

    labels[i] is the region id of point i, ids are 0..region_count-1;
    regions[r] holds the sorted indices of region r.
    """

    labels: np.ndarray
    regions: tuple[np.ndarray, ...]

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.ndim != 1 or lab.shape[0] < 1:
            raise ValueError("labels must be a non-empty 1-d array")
        regions = tuple(np.asarray(r, dtype=np.int64) for r in self.regions)
        if not regions:
            raise ValueError("partition needs at least one region")
        seen = np.full(lab.shape[0], -1, dtype=np.int64)
        for rid, idx in enumerate(regions):
            if idx.size == 0:
                raise ValueError(f"region {rid} is empty")
            if np.any(np.diff(idx) <= 0):
                raise ValueError(f"region {rid} indices must be sorted and unique")
            if idx[0] < 0 or idx[-1] >= lab.shape[0]:
                raise ValueError(f"region {rid} has out-of-range indices")
            if np.any(seen[idx] != -1):
                raise ValueError("regions overlap")
            seen[idx] = rid
        if np.any(seen == -1):
            raise ValueError("regions do not cover all points")
        if np.any(seen != lab):
            raise ValueError("labels disagree with region membership")
        lab = lab.copy()
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "regions", regions)

    @classmethod
    def from_labels(cls, labels) -> "SupervoxelPartition":
        """Build a partition from raw labels, compacting ids to 0..R-1 in
        sorted order of the original values."""
        raw = np.asarray(labels, dtype=np.int64)
        if raw.ndim != 1 or raw.shape[0] < 1:
            raise ValueError("labels must be a non-empty 1-d array")
        uniq, compact = np.unique(raw, return_inverse=True)
        regions = tuple(np.flatnonzero(compact == r) for r in range(uniq.shape[0]))
        return cls(labels=compact.astype(np.int64), regions=regions)

    @property
    def region_count(self) -> int:
        return len(self.regions)

    def sizes(self) -> np.ndarray:
        return np.asarray([r.size for r in self.regions], dtype=np.int64)

    def __len__(self) -> int:
        return self.labels.shape[0]


def _farthest_point_sample(pts: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """m indices spread across the cloud; first seed drawn from rng, the rest
    greedily maximize distance to the chosen set (first-max tie break)."""
    n = pts.shape[0]
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1), out=dist)
    return chosen


def _assign(pts, nrm, seed_pos, seed_nrm, w_pos, w_nrm):
    """Nearest seed per point under the combined distance; returns labels and
    the attained per-point cost."""
    cost = w_pos * np.linalg.norm(pts[:, None, :] - seed_pos[None, :, :], axis=2)
    if w_nrm > 0:
        cost = cost + w_nrm * (1.0 - np.abs(nrm @ seed_nrm.T))
    labels = np.argmin(cost, axis=1)
    attained = cost[np.arange(pts.shape[0]), labels]
    return labels, attained


def _fix_empty(labels, attained, r_count):
    """Re-seed each empty region from the point with the worst current cost."""
    counts = np.bincount(labels, minlength=r_count)
    for rid in np.flatnonzero(counts == 0):
        victim = int(np.argmax(attained))
        labels[victim] = rid
        attained[victim] = -np.inf


def segment(cloud, normals: NormalField, config: SegmenterConfig) -> SupervoxelPartition:
    """Partition a cloud into approximately n / desired_point_count regions.

    Deterministic for a fixed (cloud, normals, config): seeding uses only
    config.seed. Every region is non-empty.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    nrm = normals.normals if isinstance(normals, NormalField) else np.asarray(normals, dtype=np.float64)
    if nrm.shape != pts.shape:
        raise ValueError("normals must align with points")
    # round-half-up, so e.g. n=350 desired=100 gives 4 regions
    r_count = max(1, int(np.floor(n / config.desired_point_count + 0.5)))
    r_count = min(r_count, n)
    rng = np.random.default_rng(config.seed)
    seed_idx = _farthest_point_sample(pts, r_count, rng)
    seed_pos = pts[seed_idx].copy()
    seed_nrm = nrm[seed_idx].copy()

    labels, attained = _assign(pts, nrm, seed_pos, seed_nrm, config.position_weight,
                               config.normal_weight)
    _fix_empty(labels, attained, r_count)
    for _ in range(config.lloyd_iterations):
        # centroid / mean-normal update, then reassign
        acc = np.zeros((r_count, 3))
        np.add.at(acc, labels, pts)
        counts = np.bincount(labels, minlength=r_count).astype(np.float64)
        seed_pos = acc / counts[:, None]
        nacc = np.zeros((r_count, 3))
        np.add.at(nacc, labels, nrm)
        lengths = np.linalg.norm(nacc, axis=1)
        ok = lengths > 1e-12
        seed_nrm = np.where(ok[:, None], nacc / np.where(ok, lengths, 1.0)[:, None], seed_nrm)
        labels, attained = _assign(pts, nrm, seed_pos, seed_nrm, config.position_weight,
                                   config.normal_weight)
        _fix_empty(labels, attained, r_count)

    regions = tuple(np.flatnonzero(labels == r) for r in range(r_count))
    return SupervoxelPartition(labels=labels, regions=regions)
