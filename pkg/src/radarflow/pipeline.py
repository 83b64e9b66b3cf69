"""End-to-end runs: ego-motion, segmentation, scale, scene flow, deformation fit, evaluation.

A *scene directory* (written by :func:`write_scene_dir`) holds::

    scene.json              scene config
    camera.json             camera model
    radar.jsonl             radar frames
    labels_gt.jsonl         {"t", "dynamic"} per frame
    poses.json              [{"t", "world_from_ego", "ego_velocity"}]
    depth_relative/NNNN.dpf depth_metric/NNNN.dpf
    flow/NNNN.flw           flow to the next frame (all but the last)
    masks_gt/NNNN.pgm

:func:`run_pipeline` writes every stage's outputs plus ``manifest.json``.
The manifest holds the config hash, the seeds, per-stage metrics and sha256
digests of the output files; it has no timestamps or absolute paths.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as rio
from .config import PipelineConfig, stage_seed
from .core import CameraModel
from .deformation import DeformationFieldRegressor, field_from_dict
from .ego_motion import EgoMotionEstimate, classify_dynamic, estimate_ego_velocity
from .errors import NoDynamicRadarPoints, RadarFlowError
from .evaluation import Predictions, evaluate
from .flow_lift import associate_radial_velocity, lift_scene_flow
from .scale_recovery import RadarScaleRecovery, apply_scale
from .segmentation import RadarRoiSegmenter
from .simulator import FrameBundle, Scene, SceneConfig, simulate

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _name(k: int, ext: str) -> str:
    return f"{k:04d}.{ext}"


# ------------------------------------------------------------ scene dirs
def write_scene_dir(path, cfg: SceneConfig, bundles):
    path = Path(path)
    for sub in ("depth_relative", "depth_metric", "flow", "masks_gt"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    rio.write_json(path / "scene.json", cfg.to_dict())
    rio.write_json(path / "camera.json", cfg.camera.to_dict())
    rio.write_radar(path / "radar.jsonl", [b.radar for b in bundles])
    rio.write_jsonl(path / "labels_gt.jsonl", [{"t": b.timestamp, "dynamic": [bool(x) for x in b.dyn_labels_gt]} for b in bundles])
    poses = rio.poses_to_dict([b.timestamp for b in bundles], [b.ego_pose for b in bundles])
    for rec, b in zip(poses, bundles):
        rec["ego_velocity"] = [float(x) for x in b.ego_velocity]
    rio.write_json(path / "poses.json", poses)
    for b in bundles:
        rio.write_depth(path / "depth_relative" / _name(b.index, "dpf"), b.depth_relative)
        rio.write_depth(path / "depth_metric" / _name(b.index, "dpf"), b.depth_metric)
        rio.write_mask(path / "masks_gt" / _name(b.index, "pgm"), b.mask_gt)
        if b.flow_to_next is not None:
            rio.write_flow(path / "flow" / _name(b.index, "flw"), b.flow_to_next)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


def load_scene_dir(path):
    """Return ``(scene, bundles)`` from a scene directory.

    Bundles read from disk carry depth at f32 precision and no per-pixel
    object ids (``object_ids`` is ``None``).
    """
    path = Path(path)
    _require(path)
    cfg = SceneConfig.from_dict(rio.read_json(_require(path / "scene.json")))
    frames = rio.read_radar(_require(path / "radar.jsonl"))
    labels = rio.read_jsonl(_require(path / "labels_gt.jsonl"))
    times, poses = rio.poses_from_dict(rio.read_json(_require(path / "poses.json")))
    vel = [np.asarray(r["ego_velocity"], dtype=np.float64) for r in rio.read_json(path / "poses.json")]
    scene = Scene(cfg)
    bundles = []
    for k, frame in enumerate(frames):
        flow_path = path / "flow" / _name(k, "flw")
        bundles.append(
            FrameBundle(
                index=k,
                timestamp=frame.timestamp,
                radar=frame,
                dyn_labels_gt=np.asarray(labels[k]["dynamic"], dtype=bool),
                depth_metric=rio.read_depth(_require(path / "depth_metric" / _name(k, "dpf"))),
                depth_relative=rio.read_depth(_require(path / "depth_relative" / _name(k, "dpf"))),
                mask_gt=rio.read_mask(_require(path / "masks_gt" / _name(k, "pgm"))),
                flow_to_next=rio.read_flow(flow_path) if flow_path.exists() else None,
                ego_pose=poses[k],
                ego_velocity=vel[k],
                object_poses=(),
                object_ids=None,
            )
        )
    return scene, bundles


# ------------------------------------------------------------- stages
def ego_records(frames, estimates, labels) -> list:
    out = []
    for f, est, lab in zip(frames, estimates, labels):
        rec = {"t": float(f.timestamp)}
        rec.update(est.to_dict())
        rec["dynamic"] = [bool(x) for x in lab]
        out.append(rec)
    return out


def read_ego(path):
    """``(estimates, labels)`` from an ego-motion JSONL file."""
    recs = rio.read_jsonl(path)
    return [EgoMotionEstimate.from_dict(r) for r in recs], [np.asarray(r["dynamic"], dtype=bool) for r in recs]


def run_ego_motion(frames, cfg: PipelineConfig, seed: int):
    ransac = cfg.ego.ransac(seed)
    estimates = [estimate_ego_velocity(f, ransac) for f in frames]
    labels = [classify_dynamic(f, e, cfg.ego.tau_dyn) for f, e in zip(frames, estimates)]
    return estimates, labels


def run_segment(frames, labels, cam: CameraModel, cfg: PipelineConfig, seed: int):
    seg = RadarRoiSegmenter(cfg.segment.patch_size, cfg.segment.max_anchors, cfg.segment.sigma_px, cfg.segment.tau, seed).fit()
    return [seg.predict(f, lab, cam) for f, lab in zip(frames, labels)]


def run_scale(depths, frames, labels, cam: CameraModel, cfg: PipelineConfig):
    """Per-frame votes, the scales actually applied, acceptance rates and metric depths."""
    sc = cfg.scale.scale_config()
    est = RadarScaleRecovery(cam, **{k: getattr(sc, k) for k in sc.__dataclass_fields__})
    votes, rates = [], []
    for d, f, lab in zip(depths, frames, labels):
        est.fit(d, frame=f, dyn_labels=lab)
        votes.append(est.scale_)
        rates.append(est.acceptance_rate_)
    used = list(votes)
    if cfg.scale.aggregate == "sequence":
        used = [float(np.median(votes))] * len(votes)
    metric = [apply_scale(d, s) for d, s in zip(depths, used)]
    return votes, used, rates, metric


def run_lift(bundles, metric_depths, masks, labels, velocities, cam, cfg: PipelineConfig):
    samples = []
    for k in range(len(bundles) - 1):
        b, nb = bundles[k], bundles[k + 1]
        if b.flow_to_next is None:
            continue
        lifted = lift_scene_flow(
            b.flow_to_next,
            metric_depths[k],
            metric_depths[k + 1],
            masks[k],
            cam,
            b.ego_pose,
            nb.ego_pose,
            cfg.flow.stride,
            t_i=b.timestamp,
            t_j=nb.timestamp,
            max_tap_ratio=cfg.flow.max_tap_ratio,
        )
        try:
            lifted = associate_radial_velocity(
                lifted,
                b.radar,
                labels[k],
                b.ego_pose,
                ego_velocity=velocities[k] if cfg.flow.compensate_ego else None,
                max_distance=cfg.flow.association_max_distance,
            )
        except NoDynamicRadarPoints:
            pass
        samples.extend(lifted)
    return samples


def run_fit(samples, cfg: PipelineConfig, seed: int):
    if len(samples) > cfg.train.max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(len(samples), cfg.train.max_samples, replace=False))
        samples = [samples[i] for i in keep]
    tc = cfg.train.train_config(seed)
    reg = DeformationFieldRegressor(
        learning_rate=tc.learning_rate,
        iterations=tc.iterations,
        batch_size=tc.batch_size,
        lambda_flow=tc.lambda_flow,
        lambda_rad=tc.lambda_rad,
        lr_final=tc.lr_final,
        random_state=seed,
    )
    return reg.fit(samples)


# ------------------------------------------------------------ manifest
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _clean(obj):
    """Make metrics JSON-safe (numpy scalars to Python, NaN/inf to None)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class PipelineResult:
    exit_code: int
    manifest: dict
    manifest_path: Path | None


class _Run:
    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg, self.out = cfg, out
        self.manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "status": "running", "stages": []}

    def stage(self, name, seed=None):
        rec = {"name": name, "status": "running", "seed": seed, "metrics": {}, "outputs": {}}
        self.manifest["stages"].append(rec)
        return rec

    def outputs(self, rec, *rel):
        for r in rel:
            p = self.out / r
            if p.is_dir():
                for f in sorted(p.iterdir()):
                    rec["outputs"][str(f.relative_to(self.out))] = _sha256(f)
            else:
                rec["outputs"][str(r)] = _sha256(p)

    def write(self) -> Path:
        path = self.out / "manifest.json"
        path.write_text(json.dumps(_clean(self.manifest), indent=2, allow_nan=False) + "\n")
        return path


def _error_record(exc: BaseException, stage: str | None) -> dict:
    rec = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "filename", None)
    if path is None and isinstance(exc, FileNotFoundError) and exc.args:
        path = str(exc.args[0]).removeprefix("missing input: ")
    if path is not None:
        rec["path"] = str(path)
    return rec


def run_pipeline(cfg: PipelineConfig, output_dir=None) -> PipelineResult:
    """Run every stage in order; never raises for stage failures.

    Returns the exit code (0 on success) and the manifest, which on failure
    carries an ``error`` record naming the stage, exception type and message.
    """
    out = Path(output_dir or cfg.output_dir or "radarflow_out")
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    current = None
    try:
        # inputs
        current = "simulate"
        rec = run.stage("simulate")
        if cfg.input_dir is not None:
            scene, bundles = load_scene_dir(cfg.input_dir)
            rec["status"] = "skipped"
            rec["metrics"] = {"source": "input_dir", "n_frames": len(bundles)}
        else:
            scene_cfg = SceneConfig.from_dict(cfg.scene or {})
            bundles = simulate(scene_cfg)
            write_scene_dir(out / "scene", scene_cfg, bundles)
            scene = Scene(scene_cfg)
            rec["status"] = "ok"
            rec["metrics"] = {"n_frames": len(bundles), "scene_seed": scene_cfg.seed}
            run.outputs(rec, "scene/radar.jsonl", "scene/poses.json", "scene/labels_gt.jsonl")
        cam = scene.cfg.camera
        frames = [b.radar for b in bundles]

        current = "ego-motion"
        seed = stage_seed(cfg.seed, current)
        rec = run.stage(current, seed)
        estimates, labels = run_ego_motion(frames, cfg, seed)
        rio.write_jsonl(out / "ego.jsonl", ego_records(frames, estimates, labels))
        rec["metrics"] = {
            "mean_rms_residual": float(np.mean([e.rms_residual for e in estimates])),
            "n_dynamic": int(sum(int(np.count_nonzero(l)) for l in labels)),
            "n_points": int(sum(len(f) for f in frames)),
        }
        run.outputs(rec, "ego.jsonl")
        rec["status"] = "ok"

        current = "segment"
        seed = stage_seed(cfg.seed, current)
        rec = run.stage(current, seed)
        masks = run_segment(frames, labels, cam, cfg, seed)
        (out / "masks").mkdir(exist_ok=True)
        for b, m in zip(bundles, masks):
            rio.write_mask(out / "masks" / _name(b.index, "pgm"), m)
        inter = sum(int(np.count_nonzero(m.data & b.mask_gt.data)) for m, b in zip(masks, bundles))
        union = sum(int(np.count_nonzero(m.data | b.mask_gt.data)) for m, b in zip(masks, bundles))
        rec["metrics"] = {"mask_fraction": float(np.mean([m.data.mean() for m in masks])), "iou_vs_gt": inter / union if union else 1.0}
        run.outputs(rec, "masks")
        rec["status"] = "ok"

        current = "scale"
        rec = run.stage(current)
        votes, used, rates, metric = run_scale([b.depth_relative for b in bundles], frames, labels, cam, cfg)
        (out / "depth").mkdir(exist_ok=True)
        for b, d in zip(bundles, metric):
            rio.write_depth(out / "depth" / _name(b.index, "dpf"), d)
        rio.write_json(out / "scale.json", {"aggregate": cfg.scale.aggregate, "votes": votes, "scales": used, "acceptance_rate": rates})
        rec["metrics"] = {"median_vote": float(np.median(votes)), "mean_acceptance_rate": float(np.mean(rates))}
        run.outputs(rec, "scale.json", "depth")
        rec["status"] = "ok"

        current = "lift-flow"
        rec = run.stage(current)
        masks_for_lift = masks if cfg.flow.mask_source == "predicted" else [b.mask_gt for b in bundles]
        samples = run_lift(bundles, metric, masks_for_lift, labels, [e.velocity for e in estimates], cam, cfg)
        rio.write_samples(out / "samples.jsonl", samples)
        rec["metrics"] = {"n_samples": len(samples), "n_with_radial": sum(s.radial_velocity is not None for s in samples)}
        run.outputs(rec, "samples.jsonl")
        rec["status"] = "ok"

        current = "fit-deform"
        seed = stage_seed(cfg.seed, current)
        rec = run.stage(current, seed)
        field = None
        if samples:
            reg = run_fit(samples, cfg, seed)
            field = reg.field_
            rio.write_json(out / "field.json", field.to_dict())
            rio.write_loss_csv(out / "loss.csv", reg.loss_history_)
            hist = reg.loss_history_
            rec["metrics"] = {"iterations": len(hist), "first_loss": float(hist[0]) if len(hist) else None, "final_loss": float(hist[-1]) if len(hist) else None}
            run.outputs(rec, "field.json", "loss.csv")
            rec["status"] = "ok"
        else:
            rec["status"] = "skipped"
            rec["metrics"] = {"reason": "no scene-flow samples"}

        current = "eval"
        rec = run.stage(current)
        report = evaluate(
            scene,
            bundles,
            Predictions([e.velocity for e in estimates], labels, used, samples, field),
        )
        report.write(out / "report.json", out / "report.csv")
        rec["metrics"] = report.to_dict()
        run.outputs(rec, "report.json", "report.csv")
        rec["status"] = "ok"
        current = None
    except (RadarFlowError, OSError, ValueError, KeyError) as exc:
        log.error("stage %s failed: %s", current, exc)
        if run.manifest["stages"] and run.manifest["stages"][-1]["status"] == "running":
            run.manifest["stages"][-1]["status"] = "error"
        run.manifest["status"] = "error"
        run.manifest["error"] = _error_record(exc, current)
        return PipelineResult(EXIT_STAGE_ERROR, _clean(run.manifest), run.write())
    run.manifest["status"] = "ok"
    return PipelineResult(EXIT_OK, _clean(run.manifest), run.write())


def load_predictions(pred_dir, n_frames=None) -> Predictions:
    """Read the outputs of a pipeline run (or of the individual CLI stages)."""
    pred_dir = Path(pred_dir)
    _require(pred_dir)
    p = Predictions()
    if (pred_dir / "ego.jsonl").exists():
        est, labels = read_ego(pred_dir / "ego.jsonl")
        p.ego_velocity = [e.velocity for e in est]
        p.dyn_labels = labels
    if (pred_dir / "scale.json").exists():
        p.scales = list(rio.read_json(pred_dir / "scale.json")["scales"])
    if (pred_dir / "samples.jsonl").exists():
        p.samples = rio.read_samples(pred_dir / "samples.jsonl")
    if (pred_dir / "field.json").exists():
        p.field = field_from_dict(rio.read_json(pred_dir / "field.json"))
    return p


__all__ = [
    "PipelineResult",
    "load_predictions",
    "load_scene_dir",
    "read_ego",
    "run_pipeline",
    "write_scene_dir",
]
