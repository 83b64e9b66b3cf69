"""``radarflow`` command line."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as rio
from .config import PipelineConfig, stage_seed
from .core import CameraModel, ScaleState
from .errors import InvalidConfig, NoDynamicRadarPoints, RadarFlowError
from .evaluation import evaluate
from .flow_lift import associate_radial_velocity, lift_scene_flow
from .pipeline import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_STAGE_ERROR,
    _name,
    ego_records,
    load_predictions,
    load_scene_dir,
    read_ego,
    run_ego_motion,
    run_fit,
    run_pipeline,
    run_scale,
    run_segment,
    write_scene_dir,
)
from .simulator import SceneConfig, simulate

log = logging.getLogger("radarflow")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input: {p}")
    return p


def _camera(path) -> CameraModel:
    return CameraModel.from_dict(rio.read_json(_require(path)))


def _labels(path, n_frames=None):
    """Per-frame label lists from an ego-motion JSONL or a JSON list (one frame)."""
    p = _require(path)
    if p.suffix == ".jsonl":
        return read_ego(p)[1]
    data = rio.read_json(p)
    if isinstance(data, dict):
        data = data["dynamic"]
    if data and isinstance(data[0], list):
        return [np.asarray(x, dtype=bool) for x in data]
    return [np.asarray(data, dtype=bool)]


# ------------------------------------------------------------ commands
def cmd_simulate(args):
    scene_cfg = SceneConfig.from_dict(rio.read_json(_require(args.config))) if args.config else SceneConfig()
    if args.seed is not None:
        scene_cfg = replace(scene_cfg, seed=args.seed)
    bundles = simulate(scene_cfg)
    write_scene_dir(args.out_dir, scene_cfg, bundles)
    log.info("wrote %d frames to %s", len(bundles), args.out_dir)
    return EXIT_OK


def cmd_ego_motion(args):
    cfg = _config(args)
    frames = rio.read_radar(_require(args.frames))
    estimates, labels = run_ego_motion(frames, cfg, stage_seed(cfg.seed, "ego-motion"))
    rio.write_jsonl(args.out, ego_records(frames, estimates, labels))
    return EXIT_OK


def cmd_segment(args):
    cfg = _config(args)
    if args.tau is not None:
        cfg = replace(cfg, segment=replace(cfg.segment, tau=args.tau))
    frames = rio.read_radar(_require(args.frames))
    labels = read_ego(_require(args.ego))[1]
    if len(labels) != len(frames):
        raise InvalidConfig(f"{args.ego} has {len(labels)} frames, {args.frames} has {len(frames)}")
    masks = run_segment(frames, labels, _camera(args.cam), cfg, stage_seed(cfg.seed, "segment"))
    out = Path(args.out_mask_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(masks):
        rio.write_mask(out / _name(k, "pgm"), m)
    return EXIT_OK


def cmd_scale(args):
    cfg = _config(args)
    if args.aggregate is not None:
        cfg = replace(cfg, scale=replace(cfg.scale, aggregate=args.aggregate))
    depths = [rio.read_depth(_require(p)) for p in args.depth]
    frames = rio.read_radar(_require(args.frame))
    labels = _labels(args.labels) if args.labels else [np.zeros(len(f), dtype=bool) for f in frames]
    if not (len(depths) == len(frames) == len(labels)):
        raise InvalidConfig(f"{len(depths)} depth maps, {len(frames)} radar frames and {len(labels)} label sets")
    for d in depths:
        if d.scale_state != ScaleState.RELATIVE:
            raise InvalidConfig("scale expects relative depth maps")
    votes, used, rates, metric = run_scale(depths, frames, labels, _camera(args.cam), cfg)
    if len(metric) == 1:
        rio.write_depth(args.out, metric[0])
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, d in enumerate(metric):
            rio.write_depth(out / _name(k, "dpf"), d)
    report = {
        "aggregate": cfg.scale.aggregate,
        "votes": votes,
        "scales": used,
        "scale": used[0] if len(set(used)) == 1 else None,
        "acceptance_rate": rates,
    }
    if args.report:
        rio.write_json(args.report, report)
    print(json.dumps(report))
    return EXIT_OK


def cmd_lift_flow(args):
    cfg = _config(args)
    frames = rio.read_radar(_require(args.frames))
    times, poses = rio.poses_from_dict(rio.read_json(_require(args.poses)))
    estimates, labels = read_ego(_require(args.ego))
    cam = _camera(args.cam)
    depth_dir, mask_dir, flow_dir = Path(args.depth_dir), Path(args.mask_dir), Path(args.flow_dir)
    samples = []
    for k in range(len(frames) - 1):
        flow_path = flow_dir / _name(k, "flw")
        if not flow_path.exists():
            continue
        lifted = lift_scene_flow(
            rio.read_flow(flow_path),
            rio.read_depth(_require(depth_dir / _name(k, "dpf"))),
            rio.read_depth(_require(depth_dir / _name(k + 1, "dpf"))),
            rio.read_mask(_require(mask_dir / _name(k, "pgm"))),
            cam,
            poses[k],
            poses[k + 1],
            cfg.flow.stride,
            t_i=frames[k].timestamp,
            t_j=frames[k + 1].timestamp,
            max_tap_ratio=cfg.flow.max_tap_ratio,
        )
        with contextlib.suppress(NoDynamicRadarPoints):
            lifted = associate_radial_velocity(
                lifted,
                frames[k],
                labels[k],
                poses[k],
                ego_velocity=estimates[k].velocity if cfg.flow.compensate_ego else None,
                max_distance=cfg.flow.association_max_distance,
            )
        samples.extend(lifted)
    rio.write_samples(args.out, samples)
    log.info("wrote %d samples", len(samples))
    return EXIT_OK


def cmd_fit_deform(args):
    cfg = _config(args)
    samples = rio.read_samples(_require(args.samples))
    if not samples:
        raise InvalidConfig(f"{args.samples} holds no samples")
    reg = run_fit(samples, cfg, stage_seed(cfg.seed, "fit-deform"))
    rio.write_json(args.out, reg.field_.to_dict())
    if args.history:
        rio.write_loss_csv(args.history, reg.loss_history_)
    return EXIT_OK


def cmd_eval(args):
    scene, bundles = load_scene_dir(args.gt)
    report = evaluate(scene, bundles, load_predictions(args.pred))
    csv_path = args.csv or str(Path(args.report).with_suffix(".csv"))
    report.write(args.report, csv_path)
    print(report.to_json())
    return EXIT_OK


def cmd_pipeline(args):
    cfg = _config(args)
    result = run_pipeline(cfg, args.out_dir)
    if result.exit_code != EXIT_OK:
        print(json.dumps({"status": "error", **result.manifest["error"]}), file=sys.stderr)
    else:
        print(result.manifest_path)
    return result.exit_code


# -------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads (env RADARFLOW_THREADS)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="radarflow", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene directory")
    s.add_argument("--config", help="scene config JSON (default scene when omitted)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ego-motion", parents=[common], help="RANSAC ego velocity and dynamic labels per frame")
    s.add_argument("--frames", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ego_motion)

    s = sub.add_parser("segment", parents=[common], help="composite dynamic masks from radar ROIs")
    s.add_argument("--frames", required=True)
    s.add_argument("--ego", required=True)
    s.add_argument("--cam", required=True)
    s.add_argument("--config")
    s.add_argument("--tau", type=float, default=None, help="mask threshold (overrides the config)")
    s.add_argument("--out-mask-dir", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("scale", parents=[common], help="metric scale of relative depth maps")
    s.add_argument("--depth", required=True, nargs="+", help="one DPF1 file per radar frame")
    s.add_argument("--cam", required=True)
    s.add_argument("--frame", required=True, help="radar JSONL with one frame per depth map")
    s.add_argument("--labels", help="ego-motion JSONL or JSON list of dynamic flags")
    s.add_argument("--config")
    s.add_argument("--aggregate", choices=["frame", "sequence"], default=None)
    s.add_argument("--out", required=True, help="DPF1 file (one input) or directory")
    s.add_argument("--report")
    s.set_defaults(func=cmd_scale)

    s = sub.add_parser("lift-flow", parents=[common], help="3-D scene-flow samples from flow, depth and masks")
    s.add_argument("--frames", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--ego", required=True)
    s.add_argument("--cam", required=True)
    s.add_argument("--flow-dir", required=True)
    s.add_argument("--depth-dir", required=True, help="metric DPF1 maps")
    s.add_argument("--mask-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lift_flow)

    s = sub.add_parser("fit-deform", parents=[common], help="train the deformation field")
    s.add_argument("--samples", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(func=cmd_fit_deform)

    s = sub.add_parser("eval", parents=[common], help="metrics against simulator ground truth")
    s.add_argument("--gt", required=True, help="scene directory")
    s.add_argument("--pred", required=True, help="directory of pipeline outputs")
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage and write a manifest")
    s.add_argument("--config")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_pipeline)
    return p


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("RADARFLOW_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _threads(args)
    except ValueError:
        print(json.dumps({"status": "error", "type": "InvalidConfig", "message": "RADARFLOW_THREADS must be an integer"}), file=sys.stderr)
        return EXIT_CONFIG_ERROR
    limits = threadpool_limits(n) if n else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except InvalidConfig as exc:
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (RadarFlowError, OSError, ValueError, KeyError) as exc:
        rec = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, FileNotFoundError):
            rec["path"] = getattr(exc, "filename", None) or str(exc).removeprefix("missing input: ")
        print(json.dumps(rec), file=sys.stderr)
        return EXIT_STAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
