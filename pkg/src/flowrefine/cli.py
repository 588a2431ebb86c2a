"""Command-line front end.

Subcommands: segment, baseline-flow, embed, refine, eval, synth, sweep,
pipeline. Every subcommand accepts --seed, --threads, and --config; numeric
knobs come from the config file and can be overridden by flags. Exit codes:
0 success, 1 malformed or missing input file, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .crf import build_observations, refine
from .embedding import (EmbeddingConfig, baseline_initial_flow, cross_frame_neighbors,
                        flow_embedding, load_weights, save_weights)
from .errors import ConfigError, InputFileError, NumericalError
from .geometry import PointCloud, estimate_normals
from .io import load_labels, load_ply, load_sfl, save_labels, save_ply, save_sfl
from .metrics import CameraIntrinsics
from .pipeline import (PipelineConfig, RunReport, metrics_to_report_text, parse_config,
                       run_pipeline, write_report)
from .supervoxel import SupervoxelPartition, segment
from .synth import SyntheticSceneSpec, generate_scene, perturb_flow, sensitivity_sweep


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="global random seed (default 0)")
    parser.add_argument("--threads", default="auto", metavar="N|auto",
                        help="cap BLAS/threadpool threads (default auto)")
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="key=value config file")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise InputFileError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), base=cfg)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _apply_threads(args) -> None:
    if args.threads == "auto":
        return
    try:
        n = int(args.threads)
    except ValueError:
        raise ConfigError(f"--threads expects an integer or 'auto', got '{args.threads}'") from None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import threadpoolctl
    # keep the controller alive for the process lifetime
    global _THREAD_LIMIT
    _THREAD_LIMIT = threadpoolctl.threadpool_limits(limits=n)


_THREAD_LIMIT = None


def _load_cloud_and_normals(path: str, cfg: PipelineConfig):
    cloud, file_normals = load_ply(path)
    if file_normals is not None:
        return cloud, file_normals
    return cloud, estimate_normals(cloud, k=min(cfg.normal_k, len(cloud)))


def _initial_flow_for(cloud_t: PointCloud, args, cfg: PipelineConfig) -> np.ndarray:
    if getattr(args, "initial_flow", None):
        z = load_sfl(args.initial_flow)
        if z.shape[0] != len(cloud_t):
            raise InputFileError(
                f"initial flow has {z.shape[0]} vectors, cloud has {len(cloud_t)} points")
        return z
    if getattr(args, "frame_t1", None):
        cloud_t1, _ = load_ply(args.frame_t1)
        return baseline_initial_flow(cloud_t, cloud_t1, k=cfg.baseline_k, tau=cfg.baseline_tau)
    raise ConfigError("either --initial-flow or --frame-t1 is required")


def _cmd_segment(args) -> int:
    cfg = _load_config(args)
    if args.desired is not None:
        cfg = replace(cfg, supervoxel_size=args.desired)
    cloud, normals = _load_cloud_and_normals(args.input, cfg)
    part = segment(cloud, normals, cfg.segmenter_config())
    save_labels(args.output, part.labels)
    return 0


def _cmd_baseline_flow(args) -> int:
    cfg = _load_config(args)
    if args.k is not None:
        cfg = replace(cfg, baseline_k=args.k)
    if args.tau is not None:
        cfg = replace(cfg, baseline_tau=args.tau)
    cloud_t, _ = load_ply(args.frame_t)
    cloud_t1, _ = load_ply(args.frame_t1)
    if cfg.baseline_k < 1:
        raise ConfigError("--k must be >= 1")
    if cfg.baseline_tau <= 0:
        raise ConfigError("--tau must be > 0")
    flow = baseline_initial_flow(cloud_t, cloud_t1, k=cfg.baseline_k, tau=cfg.baseline_tau)
    save_sfl(args.output, flow)
    return 0


def _with_default_features(cloud: PointCloud) -> PointCloud:
    # raw coordinates stand in when no learned features are supplied
    if cloud.features is not None:
        return cloud
    return PointCloud(points=cloud.points, features=cloud.points)


def _cmd_embed(args) -> int:
    cfg = _load_config(args)
    cloud_t = _with_default_features(load_ply(args.frame_t)[0])
    cloud_t1 = _with_default_features(load_ply(args.frame_t1)[0])
    if cloud_t.feature_dim != cloud_t1.feature_dim:
        raise InputFileError("frames carry different feature widths")
    if args.weights is not None:
        net_cfg = load_weights(args.weights)
        if args.neighbor_k is not None:
            net_cfg = replace(net_cfg, neighbor_k=args.neighbor_k)
        if net_cfg.feature_dim != cloud_t.feature_dim:
            raise InputFileError(
                f"weights expect {net_cfg.feature_dim}-dim features, "
                f"frames have {cloud_t.feature_dim}")
    else:
        net_cfg = EmbeddingConfig.seeded(
            feature_dim=cloud_t.feature_dim,
            neighbor_k=args.neighbor_k if args.neighbor_k is not None else 8,
            cost_dim=args.cost_dim, pos_dim=args.pos_dim, hidden_dim=args.hidden_dim,
            seed=cfg.seed)
    if args.save_weights is not None:
        save_weights(args.save_weights, net_cfg)
    graph = cross_frame_neighbors(cloud_t, cloud_t1, net_cfg.neighbor_k)
    emb = flow_embedding(cloud_t, cloud_t1, graph, net_cfg)
    with open(args.output, "w", encoding="ascii") as fh:
        for row in emb:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    return 0


def _cmd_refine(args) -> int:
    cfg = _load_config(args)
    cloud_t, normals = _load_cloud_and_normals(args.frame_t, cfg)
    z = _initial_flow_for(cloud_t, args, cfg)
    if args.labels is None or args.labels == "auto":
        partition = segment(cloud_t, normals, cfg.segmenter_config())
    else:
        raw = load_labels(args.labels)
        if raw.shape[0] != len(cloud_t):
            raise InputFileError(
                f"labels file has {raw.shape[0]} lines, cloud has {len(cloud_t)} points")
        partition = SupervoxelPartition.from_labels(raw)
    crf_cfg = cfg.crf_config()
    observations = build_observations(cloud_t, normals, crf_cfg)
    result = refine(cloud_t, z, partition, observations, crf_cfg)
    save_sfl(args.output, result.flow)
    if args.report is not None:
        report = RunReport(pairwise_ms=result.pairwise_ms, highorder_ms=result.highorder_ms,
                           total_ms=result.pairwise_ms + result.highorder_ms,
                           iterations=result.iterations, final_delta=result.final_delta,
                           point_count=len(cloud_t))
        with open(args.report, "w", encoding="ascii") as fh:
            fh.write(write_report(report))
    return 0


def _cmd_eval(args) -> int:
    _load_config(args)
    pred = load_sfl(args.pred)
    gt = load_sfl(args.gt)
    cloud, _ = load_ply(args.cloud)
    if pred.shape[0] != len(cloud) or gt.shape[0] != len(cloud):
        raise InputFileError("flow lengths do not match the cloud")
    given = [v is not None for v in (args.fx, args.fy, args.cx, args.cy)]
    intrinsics = None
    if any(given):
        if not all(given):
            raise ConfigError("camera needs all of --fx --fy --cx --cy")
        try:
            intrinsics = CameraIntrinsics(fx=args.fx, fy=args.fy, cx=args.cx, cy=args.cy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    text = metrics_to_report_text(pred, gt, cloud, intrinsics)
    if args.output is not None:
        with open(args.output, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _scene_spec_from(args, cfg: PipelineConfig) -> SyntheticSceneSpec:
    try:
        return SyntheticSceneSpec(
            body_count=args.bodies, points_per_body=args.points_per_body,
            rotation_max_deg=args.rotation_max, translation_max=args.translation_max,
            cluster_radius=args.cluster_radius, noise_sigma=args.noise_sigma,
            seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _add_scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--bodies", type=int, default=5)
    parser.add_argument("--points-per-body", type=int, default=200)
    parser.add_argument("--rotation-max", type=float, default=20.0, metavar="DEG")
    parser.add_argument("--translation-max", type=float, default=0.5, metavar="M")
    parser.add_argument("--cluster-radius", type=float, default=0.5, metavar="M")
    parser.add_argument("--noise-sigma", type=float, default=0.05, metavar="M")


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    spec = _scene_spec_from(args, cfg)
    scene = generate_scene(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    save_ply(os.path.join(args.out_dir, "frame_t.ply"), scene.cloud_t)
    save_ply(os.path.join(args.out_dir, "frame_t1.ply"), scene.cloud_t1)
    save_sfl(os.path.join(args.out_dir, "gt.sfl"), scene.gt_flow)
    save_labels(os.path.join(args.out_dir, "bodies.txt"), scene.bodies.labels)
    if spec.noise_sigma > 0:
        noisy = perturb_flow(scene.gt_flow, spec.noise_sigma, seed=spec.seed + 1)
        save_sfl(os.path.join(args.out_dir, "initial.sfl"), noisy)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    spec = _scene_spec_from(args, cfg)
    try:
        counts = [int(c) for c in args.desired_counts.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--desired-counts expects integers, got '{args.desired_counts}'") from None
    if not counts:
        raise ConfigError("--desired-counts must list at least one value")
    rows = sensitivity_sweep(spec, counts, cfg.crf_config())
    width = max(len("desired"), max(len(str(d)) for d, _ in rows))
    lines = [f"{'desired':>{width}}  epe3d"]
    for desired, epe in rows:
        lines.append(f"{desired:>{width}d}  {repr(epe)}")
    text = "\n".join(lines) + "\n"
    if args.output is not None:
        with open(args.output, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, frame_t=args.frame_t, frame_t1=args.frame_t1,
                  initial_flow=args.initial_flow, labels=args.labels,
                  gt_flow=args.gt, out_dir=args.out_dir)
    report = run_pipeline(cfg)
    sys.stdout.write(write_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowrefine",
        description="Refine per-point scene flow between two point-cloud frames.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="partition a cloud into compact regions")
    p.add_argument("--input", required=True, metavar="PLY")
    p.add_argument("--desired", type=int, default=None, metavar="N",
                   help="target points per region (default 140)")
    p.add_argument("--output", required=True, metavar="LABELS")
    _common_flags(p)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("baseline-flow", help="closest-point soft initial flow")
    p.add_argument("--frame-t", required=True, metavar="PLY")
    p.add_argument("--frame-t1", required=True, metavar="PLY")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--output", required=True, metavar="SFL")
    _common_flags(p)
    p.set_defaults(func=_cmd_baseline_flow)

    p = sub.add_parser("embed", help="position-aware matching-cost embeddings")
    p.add_argument("--frame-t", required=True, metavar="PLY")
    p.add_argument("--frame-t1", required=True, metavar="PLY")
    p.add_argument("--weights", default=None, metavar="PATH")
    p.add_argument("--save-weights", default=None, metavar="PATH")
    p.add_argument("--neighbor-k", type=int, default=None)
    p.add_argument("--cost-dim", type=int, default=16)
    p.add_argument("--pos-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--output", required=True, metavar="TXT")
    _common_flags(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("refine", help="mean-field refinement of an initial flow")
    p.add_argument("--frame-t", required=True, metavar="PLY")
    p.add_argument("--frame-t1", default=None, metavar="PLY")
    p.add_argument("--initial-flow", default=None, metavar="SFL")
    p.add_argument("--labels", default=None, metavar="FILE|auto",
                   help="region labels file, or 'auto' to segment internally")
    p.add_argument("--output", required=True, metavar="SFL")
    p.add_argument("--report", default=None, metavar="TXT")
    _common_flags(p)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="flow metrics against ground truth")
    p.add_argument("--pred", required=True, metavar="SFL")
    p.add_argument("--gt", required=True, metavar="SFL")
    p.add_argument("--cloud", required=True, metavar="PLY")
    p.add_argument("--fx", type=float, default=None)
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)
    p.add_argument("--output", default=None, metavar="TXT")
    _common_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a rigid multi-body scene")
    _add_scene_flags(p)
    p.add_argument("--out-dir", required=True, metavar="DIR")
    _common_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("sweep", help="region-size sensitivity sweep")
    _add_scene_flags(p)
    p.add_argument("--desired-counts", required=True, metavar="N,N,...")
    p.add_argument("--output", default=None, metavar="TXT")
    _common_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("pipeline", help="segment + initial flow + refine + eval")
    p.add_argument("--frame-t", required=True, metavar="PLY")
    p.add_argument("--frame-t1", default=None, metavar="PLY")
    p.add_argument("--initial-flow", default=None, metavar="SFL")
    p.add_argument("--labels", default=None, metavar="FILE")
    p.add_argument("--gt", default=None, metavar="SFL")
    p.add_argument("--out-dir", required=True, metavar="DIR")
    _common_flags(p)
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except InputFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: input file not found: {exc.filename}", file=sys.stderr)
        return 1
    except IsADirectoryError as exc:
        print(f"error: expected a file: {exc.filename}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
