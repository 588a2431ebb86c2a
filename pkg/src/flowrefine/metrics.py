"""End-point-error metrics for predicted vs ground-truth flow, in 3-d and
optionally in the image plane of a pinhole camera.

Conventions: accuracies and outlier rates are percentages of points. The
relative error divides by the ground-truth flow norm clamped to 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import _as_points, as_flow

REL_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection u = fx x/z + cx, v = fy y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx,
                         self.fy * p[..., 1] / z + self.cy], axis=-1)


@dataclass(frozen=True)
class MetricsReport:
    """epe3d in meters; acc3ds, acc3dr, outliers3d in percent. The 2-d fields
    are None when no camera was given (or no point projected validly)."""

    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers3d: float
    point_count: int
    epe2d: float | None = None
    acc2d: float | None = None

    def __post_init__(self):
        for name in ("acc3ds", "acc3dr", "outliers3d"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} must be a percentage, got {v}")
        if self.epe3d < 0:
            raise ValueError("epe3d must be >= 0")


def compute_metrics(predicted, ground_truth, positions,
                    intrinsics: CameraIntrinsics | None = None) -> MetricsReport:
    """Compare flows at the given frame-t positions.

    acc3ds: err < 0.05 m or relative < 5 percent. acc3dr: err < 0.1 m or
    relative < 10 percent. outliers3d: err > 0.3 m or relative > 10 percent.
    2-d errors project p, p + flow through the camera; points with z <= 0 in
    any of the three positions are excluded.
    """
    pts = _as_points(positions)
    n = pts.shape[0]
    pred = as_flow(predicted, n=n)
    gt = as_flow(ground_truth, n=n)

    err = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    rel = err / np.maximum(gt_norm, REL_EPS)

    epe3d = float(err.mean())
    acc3ds = float(100.0 * np.mean((err < 0.05) | (rel < 0.05)))
    acc3dr = float(100.0 * np.mean((err < 0.1) | (rel < 0.1)))
    outliers = float(100.0 * np.mean((err > 0.3) | (rel > 0.1)))

    epe2d = acc2d = None
    if intrinsics is not None:
        moved_pred = pts + pred
        moved_gt = pts + gt
        valid = (pts[:, 2] > 0) & (moved_pred[:, 2] > 0) & (moved_gt[:, 2] > 0)
        if valid.any():
            base = intrinsics.project(pts[valid])
            flow2d_pred = intrinsics.project(moved_pred[valid]) - base
            flow2d_gt = intrinsics.project(moved_gt[valid]) - base
            err2 = np.linalg.norm(flow2d_pred - flow2d_gt, axis=1)
            rel2 = err2 / np.maximum(np.linalg.norm(flow2d_gt, axis=1), REL_EPS)
            epe2d = float(err2.mean())
            acc2d = float(100.0 * np.mean((err2 < 3.0) | (rel2 < 0.05)))
    return MetricsReport(epe3d=epe3d, acc3ds=acc3ds, acc3dr=acc3dr,
                         outliers3d=outliers, point_count=n,
                         epe2d=epe2d, acc2d=acc2d)
