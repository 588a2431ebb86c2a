"""End-to-end driver: segment -> initial flow -> refine -> metrics, with
file-based stage boundaries so any stage can run as its own process and feed
the next one through PLY/.sfl/label files.

Also: the key=value run-config format and the key: value run-report format.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .crf import CrfConfig, KernelSpec, build_observations, refine
from .embedding import baseline_initial_flow
from .errors import ConfigError, InputFileError
from .geometry import estimate_normals
from .io import load_labels, load_ply, load_sfl, save_labels, save_sfl
from .metrics import CameraIntrinsics, compute_metrics
from .supervoxel import SegmenterConfig, SupervoxelPartition, segment

# Config-file keys, their types, and the PipelineConfig fields they set.
_CONFIG_KEYS: dict[str, tuple[type, str]] = {
    "alpha_position": (float, "alpha_position"),
    "alpha_normal": (float, "alpha_normal"),
    "theta_position": (float, "theta_position"),
    "theta_normal": (float, "theta_normal"),
    "beta": (float, "beta"),
    "knn": (int, "knn"),
    "iterations": (int, "iterations"),
    "tolerance": (float, "tolerance"),
    "supervoxel_size": (int, "supervoxel_size"),
    "exact_leave_one_out": (bool, "exact_leave_one_out"),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Numeric knobs for every stage plus input/output paths.

    Paths default to None; run_pipeline decides what is required. frame_t is
    always needed; the initial flow comes from initial_flow when given, else
    from the closest-point baseline against frame_t1; labels come from the
    labels file when given, else from the segmenter.
    """

    # smoothing
    alpha_position: float = 0.1
    alpha_normal: float = 0.1
    theta_position: float = 0.5
    theta_normal: float = 0.5
    beta: float = 1.0
    knn: int = 8
    iterations: int = 10
    tolerance: float = 1e-5
    exact_leave_one_out: bool = False
    # segmentation
    supervoxel_size: int = 140
    position_weight: float = 1.0
    normal_weight: float = 1.0
    lloyd_iterations: int = 10
    # initial-flow baseline
    baseline_k: int = 4
    baseline_tau: float = 0.01
    # normals
    normal_k: int = 16
    # global
    seed: int = 0
    # paths
    frame_t: str | None = None
    frame_t1: str | None = None
    initial_flow: str | None = None
    labels: str | None = None
    gt_flow: str | None = None
    out_dir: str | None = None

    def crf_config(self) -> CrfConfig:
        try:
            return CrfConfig(
                kernels=(
                    KernelSpec(alpha=self.alpha_position, theta=self.theta_position,
                               observation="position"),
                    KernelSpec(alpha=self.alpha_normal, theta=self.theta_normal,
                               observation="normal"),
                ),
                beta=self.beta,
                knn_k=self.knn,
                max_iterations=self.iterations,
                tolerance=self.tolerance,
                exact_leave_one_out=self.exact_leave_one_out,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def segmenter_config(self) -> SegmenterConfig:
        try:
            return SegmenterConfig(
                desired_point_count=self.supervoxel_size,
                position_weight=self.position_weight,
                normal_weight=self.normal_weight,
                lloyd_iterations=self.lloyd_iterations,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _parse_value(key: str, raw: str, lineno: int):
    kind, _ = _CONFIG_KEYS[key]
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("true", "1"):
            return True
        if lowered in ("false", "0"):
            return False
        raise ConfigError(f"line {lineno}: key '{key}' expects true/false, got '{raw}'")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"line {lineno}: key '{key}' expects {kind.__name__}, got '{raw}'") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """key=value lines; '#' starts a comment; blank lines ignored. Unknown or
    duplicate keys and unparsable values raise ConfigError naming the line.
    All keys are optional; missing ones keep their defaults."""
    cfg = base if base is not None else PipelineConfig()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{line}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        seen.add(key)
        cfg = replace(cfg, **{_CONFIG_KEYS[key][1]: _parse_value(key, value, lineno)})
    return cfg


@dataclass(frozen=True)
class RunReport:
    """Per-stage timings, solver counters, and (when ground truth was given)
    metric values. None fields are omitted from the serialized form."""

    supervoxel_ms: float = 0.0
    pairwise_ms: float = 0.0
    highorder_ms: float = 0.0
    total_ms: float = 0.0
    iterations: int = 0
    final_delta: float = 0.0
    point_count: int = 0
    epe3d_initial: float | None = None
    epe3d: float | None = None
    acc3ds: float | None = None
    acc3dr: float | None = None
    outliers3d: float | None = None
    epe2d: float | None = None
    acc2d: float | None = None

    def __post_init__(self):
        for name in ("supervoxel_ms", "pairwise_ms", "highorder_ms", "total_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


_REPORT_INT_KEYS = ("iterations", "point_count")
_REPORT_REQUIRED = ("supervoxel_ms", "pairwise_ms", "highorder_ms", "total_ms",
                    "iterations", "final_delta", "point_count")


def write_report(report: RunReport) -> str:
    """Stable 'key: value' lines in declaration order; float values use repr
    so parse_report(write_report(r)) == r exactly."""
    lines = []
    for f in fields(RunReport):
        value = getattr(report, f.name)
        if value is None:
            continue
        if f.name in _REPORT_INT_KEYS:
            lines.append(f"{f.name}: {int(value)}")
        else:
            lines.append(f"{f.name}: {repr(float(value))}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> RunReport:
    """Inverse of write_report."""
    names = {f.name for f in fields(RunReport)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise InputFileError(f"report line {lineno}: expected 'key: value'")
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if key not in names:
            raise InputFileError(f"report line {lineno}: unknown key '{key}'")
        if key in values:
            raise InputFileError(f"report line {lineno}: duplicate key '{key}'")
        try:
            values[key] = int(value) if key in _REPORT_INT_KEYS else float(value)
        except ValueError:
            raise InputFileError(f"report line {lineno}: bad value '{value}'") from None
    missing = [k for k in _REPORT_REQUIRED if k not in values]
    if missing:
        raise InputFileError(f"report is missing keys: {', '.join(missing)}")
    return RunReport(**values)


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise ConfigError(f"{what} is required")
    if not os.path.isfile(path):
        raise InputFileError(f"{what} not found: {path}")
    return path


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Run every configured stage in order and return the report.

    When out_dir is set, each stage's product is written there (labels.txt,
    initial.sfl, refined.sfl, report.txt) and the initial flow is passed on
    through its file form, so a monolithic run produces bit-identical flows
    to running the stages as separate processes.
    """
    t_start = time.perf_counter()
    out_dir = config.out_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    cloud_t, file_normals = load_ply(_require_file(config.frame_t, "frame_t"))
    n = len(cloud_t)
    normals = file_normals if file_normals is not None else estimate_normals(
        cloud_t, k=min(config.normal_k, n))

    # initial flow: supplied file, else closest-point baseline from frame_t1
    if config.initial_flow is not None:
        z = load_sfl(_require_file(config.initial_flow, "initial_flow"))
        if z.shape[0] != n:
            raise InputFileError(
                f"initial flow has {z.shape[0]} vectors, cloud has {n} points")
    else:
        if config.frame_t1 is None:
            raise ConfigError("either initial_flow or frame_t1 is required")
        cloud_t1, _ = load_ply(_require_file(config.frame_t1, "frame_t1"))
        z = baseline_initial_flow(cloud_t, cloud_t1,
                                  k=config.baseline_k, tau=config.baseline_tau)
    if out_dir is not None:
        # round-trip through the file so in-memory and staged runs agree
        # to the bit (.sfl stores float32)
        initial_path = os.path.join(out_dir, "initial.sfl")
        save_sfl(initial_path, z)
        z = load_sfl(initial_path)

    # partition: supplied labels, else segmenter
    supervoxel_ms = 0.0
    if config.labels is not None:
        raw = load_labels(_require_file(config.labels, "labels"))
        if raw.shape[0] != n:
            raise InputFileError(f"labels file has {raw.shape[0]} lines, cloud has {n} points")
        partition = SupervoxelPartition.from_labels(raw)
    else:
        t0 = time.perf_counter()
        partition = segment(cloud_t, normals, config.segmenter_config())
        supervoxel_ms = (time.perf_counter() - t0) * 1e3
    if out_dir is not None:
        save_labels(os.path.join(out_dir, "labels.txt"), partition.labels)

    crf_cfg = config.crf_config()
    observations = build_observations(cloud_t, normals, crf_cfg)
    result = refine(cloud_t, z, partition, observations, crf_cfg)
    refined_flow = result.flow
    if out_dir is not None:
        # report metrics on the flow as persisted, so evaluating the written
        # file reproduces the report exactly (.sfl stores float32)
        refined_path = os.path.join(out_dir, "refined.sfl")
        save_sfl(refined_path, result.flow)
        refined_flow = load_sfl(refined_path)

    metric_values: dict = {}
    if config.gt_flow is not None:
        gt = load_sfl(_require_file(config.gt_flow, "gt_flow"))
        if gt.shape[0] != n:
            raise InputFileError(f"gt flow has {gt.shape[0]} vectors, cloud has {n} points")
        refined_report = compute_metrics(refined_flow, gt, cloud_t)
        initial_report = compute_metrics(z, gt, cloud_t)
        metric_values = {
            "epe3d_initial": initial_report.epe3d,
            "epe3d": refined_report.epe3d,
            "acc3ds": refined_report.acc3ds,
            "acc3dr": refined_report.acc3dr,
            "outliers3d": refined_report.outliers3d,
        }

    report = RunReport(
        supervoxel_ms=supervoxel_ms,
        pairwise_ms=result.pairwise_ms,
        highorder_ms=result.highorder_ms,
        total_ms=(time.perf_counter() - t_start) * 1e3,
        iterations=result.iterations,
        final_delta=result.final_delta,
        point_count=n,
        **metric_values,
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="ascii") as fh:
            fh.write(write_report(report))
    return report


def metrics_to_report_text(pred, gt, positions,
                           intrinsics: CameraIntrinsics | None = None) -> str:
    """Key: value lines for the eval stage (metrics only)."""
    rep = compute_metrics(pred, gt, positions, intrinsics)
    lines = [
        f"point_count: {rep.point_count}",
        f"epe3d: {repr(rep.epe3d)}",
        f"acc3ds: {repr(rep.acc3ds)}",
        f"acc3dr: {repr(rep.acc3dr)}",
        f"outliers3d: {repr(rep.outliers3d)}",
    ]
    if rep.epe2d is not None:
        lines.append(f"epe2d: {repr(rep.epe2d)}")
        lines.append(f"acc2d: {repr(rep.acc2d)}")
    return "\n".join(lines) + "\n"
