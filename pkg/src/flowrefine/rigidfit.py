"""Closed-form rigid-motion estimation between corresponding point sets.

Given source points P and destinations D, finds the proper rotation R and
translation t minimizing mean ||R p + t - d||^2 via the SVD of the centered
cross-covariance, with the determinant-sign correction that keeps R in
SO(3) even when the best orthogonal alignment would be a reflection.
"""

from __future__ import annotations

import numpy as np

from .geometry import RigidTransform, _as_points

# Singular values below this fraction of the largest are treated as rank
# deficiency: the rotation is not determined by the correspondences.
_RANK_RTOL = 1e-9


def _paired(source, destination) -> tuple[np.ndarray, np.ndarray]:
    src = _as_points(source)
    dst = _as_points(destination)
    if src.shape != dst.shape:
        raise ValueError(f"source/destination mismatch: {src.shape} vs {dst.shape}")
    if src.shape[0] < 1:
        raise ValueError("need at least one correspondence")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise ValueError("correspondences contain non-finite values")
    return src, dst


def centroids(source, destination) -> tuple[np.ndarray, np.ndarray]:
    src, dst = _paired(source, destination)
    return src.mean(axis=0), dst.mean(axis=0)


def cross_covariance(source, destination) -> np.ndarray:
    """Centered cross-covariance H = sum (p - p_bar)(d - d_bar)^T, shape (3, 3)."""
    src, dst = _paired(source, destination)
    p_bar = src.mean(axis=0)
    d_bar = dst.mean(axis=0)
    return (src - p_bar).T @ (dst - d_bar)


def kabsch_fit(source, destination) -> RigidTransform:
    """Least-squares proper rigid transform mapping source onto destination.

    Degenerate inputs (fewer than 3 points, or centered rank <= 1: all points
    coincident or collinear) fall back to the identity rotation with the
    centroid-difference translation and are flagged.
    """
    src, dst = _paired(source, destination)
    p_bar = src.mean(axis=0)
    d_bar = dst.mean(axis=0)
    if src.shape[0] < 3:
        return RigidTransform(rotation=np.eye(3), translation=d_bar - p_bar, degenerate=True)
    h = (src - p_bar).T @ (dst - d_bar)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= s[0] * _RANK_RTOL:
        return RigidTransform(rotation=np.eye(3), translation=d_bar - p_bar, degenerate=True)
    v = vt.T
    d = np.linalg.det(v @ u.T)
    sign = 1.0 if d >= 0.0 else -1.0
    rot = (v * np.array([1.0, 1.0, sign])) @ u.T
    return RigidTransform(rotation=rot, translation=d_bar - rot @ p_bar)


def rigid_flow_at(transform: RigidTransform, points) -> np.ndarray:
    """Displacement the transform induces at the given positions: R p + t - p."""
    return transform.flow_at(points)


def alignment_mse(transform: RigidTransform, source, destination) -> float:
    """Mean squared residual ||R p + t - d||^2 over correspondences."""
    src, dst = _paired(source, destination)
    res = transform.apply(src) - dst
    return float(np.mean(np.einsum("ij,ij->i", res, res)))
