"""Point-cloud primitives: clouds, rigid transforms, k-NN search, normal
estimation, and flow warping.

All positions and flows are float64 (n, 3) arrays in meters.  Containers are
frozen dataclasses and their arrays are marked read-only at construction, so
every operation returns fresh arrays instead of mutating inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Orthogonality / unit-determinant tolerance for rotations.
ROTATION_TOL = 1e-9


def _as_points(obj) -> np.ndarray:
    """Coerce a PointCloud or array-like to an (n, 3) float64 array."""
    pts = obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def as_flow(flow, n: int | None = None) -> np.ndarray:
    """Validate a flow field: (n, 3) float64, finite, optionally length-checked."""
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != 3:
        raise ValueError(f"expected (n, 3) flow, got shape {f.shape}")
    if n is not None and f.shape[0] != n:
        raise ValueError(f"flow has {f.shape[0]} vectors, expected {n}")
    if not np.isfinite(f).all():
        raise ValueError("flow contains non-finite values")
    return f


@dataclass(frozen=True)
class PointCloud:
    """Positions (and optional per-point feature vectors) for one frame."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (n, 3) with n >= 1, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", _frozen(pts))
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise ValueError("features must be (n, f) aligned with points")
            if not np.isfinite(feats).all():
                raise ValueError("features contain non-finite values")
            object.__setattr__(self, "features", _frozen(feats))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion y = R x + t with R in SO(3).

    `degenerate` marks fits that fell back to translation-only because the
    input did not determine a rotation.
    """

    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be (3, 3), got {rot.shape}")
        if tr.shape != (3,):
            raise ValueError(f"translation must be (3,), got {tr.shape}")
        if not (np.isfinite(rot).all() and np.isfinite(tr).all()):
            raise ValueError("transform contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(tr))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """R p + t for a single point (3,) or a stack (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def flow_at(self, points) -> np.ndarray:
        """Displacement R p + t - p induced at the given positions."""
        p = np.asarray(points, dtype=np.float64)
        return self.apply(p) - p

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
            degenerate=self.degenerate or other.degenerate,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rotation=rt, translation=-(rt @ self.translation),
                              degenerate=self.degenerate)

    def flat(self) -> np.ndarray:
        """Twelve numbers: rotation rows then translation, for report lines."""
        return np.concatenate([self.rotation.reshape(9), self.translation])


@dataclass(frozen=True)
class NormalField:
    """Unit surface normals with a per-point validity mask.

    `valid` is False where the local neighborhood was degenerate and the
    normal is a placeholder.
    """

    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        nrm = np.asarray(self.normals, dtype=np.float64)
        val = np.asarray(self.valid, dtype=bool)
        if nrm.ndim != 2 or nrm.shape[1] != 3:
            raise ValueError(f"normals must be (n, 3), got {nrm.shape}")
        if val.shape != (nrm.shape[0],):
            raise ValueError("valid mask must align with normals")
        if not np.isfinite(nrm).all():
            raise ValueError("normals contain non-finite values")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.abs(lengths - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "normals", _frozen(nrm))
        valid = val.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return self.normals.shape[0]


def knn_search(target, queries, k: int) -> np.ndarray:
    """Indices of the k nearest target points for each query point.

    Brute force over chunks of queries; exact. Each row is sorted ascending
    by Euclidean distance with ties broken by the lower target index, so the
    result is deterministic for any input. If the target has fewer than k
    points, rows have min(k, len(target)) columns.
    """
    tgt = _as_points(target)
    qry = _as_points(queries)
    if tgt.shape[0] == 0:
        raise ValueError("k-NN target must be non-empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_t = tgt.shape[0]
    k_eff = min(k, n_t)
    out = np.empty((qry.shape[0], k_eff), dtype=np.int64)
    if qry.shape[0] == 0:
        return out

    tgt_sq = np.einsum("ij,ij->i", tgt, tgt)
    # ~32 MB of float64 distances per chunk.
    chunk = max(1, int(4_000_000 // n_t))
    for start in range(0, qry.shape[0], chunk):
        q = qry[start:start + chunk]
        d2 = q @ tgt.T
        d2 *= -2.0
        d2 += tgt_sq[None, :]
        d2 += np.einsum("ij,ij->i", q, q)[:, None]
        if k_eff < n_t:
            cand = np.argpartition(d2, k_eff - 1, axis=1)[:, :k_eff]
            cand_d = np.take_along_axis(d2, cand, axis=1)
            order = np.lexsort((cand, cand_d), axis=1)
            sel = np.take_along_axis(cand, order, axis=1)
            # argpartition may drop a lower-index point tied with the k-th
            # distance; redo those rows with a stable full sort.
            kth = cand_d.max(axis=1)
            tied = np.flatnonzero((d2 <= kth[:, None]).sum(axis=1) > k_eff)
            for r in tied:
                sel[r] = np.argsort(d2[r], kind="stable")[:k_eff]
            out[start:start + chunk] = sel
        else:
            out[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    return out


def estimate_normals(cloud, k: int = 16) -> NormalField:
    """Per-point unit normals from PCA over the k nearest neighbors.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue. Signs follow a deterministic rule: the component
    with the largest magnitude is made positive. Neighborhoods whose points
    are all coincident get the placeholder (0, 0, 1) and valid=False.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if n < 3:
        raise ValueError("normal estimation needs at least 3 points")
    if k < 3:
        raise ValueError("k must be >= 3 for normal estimation")
    nbrs = knn_search(pts, pts, min(k, n))
    local = pts[nbrs]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    # Coincident neighborhood: covariance is exactly zero.
    valid = evals[:, 2] > 1e-20
    normals = evecs[:, :, 0].copy()
    normals[~valid] = (0.0, 0.0, 1.0)
    lead = np.take_along_axis(
        normals, np.argmax(np.abs(normals), axis=1)[:, None], axis=1)[:, 0]
    normals[lead < 0] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalField(normals=normals, valid=valid)


def warp(cloud, flow):
    """Move a cloud by a flow field: p -> p + y.

    Returns a PointCloud when given one (features carried over), otherwise a
    plain (n, 3) array.
    """
    pts = _as_points(cloud)
    f = as_flow(flow, n=pts.shape[0])
    moved = pts + f
    if isinstance(cloud, PointCloud):
        return PointCloud(points=moved, features=cloud.features)
    return moved
