"""File formats: DPF1 depth, FLW1 flow, radar JSON Lines, PGM masks, PLY clouds
and the JSON/CSV side files written by the CLI.

Binary rasters are little-endian and row-major. JSON output uses Python's
shortest round-trip float repr and a fixed key order, so identical data
always serialises to identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .core import DepthImage, RadarFrame, RigidTransform, ScaleState
from .errors import BadMagic, DimensionOverflow, NonMonotonicTimestamps, ParseError, TruncatedFile
from .flow_lift import FlowImage, SceneFlowSample
from .segmentation import DynamicMask

DEPTH_MAGIC = b"DPF1"
FLOW_MAGIC = b"FLW1"
MAX_PIXELS = 2**31
_DEPTH_HEADER = struct.Struct("<4sIIB")
_FLOW_HEADER = struct.Struct("<4sII")


def dumps(obj) -> str:
    """Canonical compact JSON (no NaN, insertion key order)."""
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, allow_nan=False, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _check_dims(width, height):
    if width * height > MAX_PIXELS:
        raise DimensionOverflow(f"{width}x{height} exceeds {MAX_PIXELS} pixels")


def _read_raster(data: bytes, header: struct.Struct, magic: bytes, channels: int):
    if len(data) < 4 or data[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < header.size:
        raise TruncatedFile("file shorter than its header")
    fields = header.unpack_from(data)
    width, height = fields[1], fields[2]
    _check_dims(width, height)
    n = width * height * channels
    if len(data) - header.size < 4 * n:
        raise TruncatedFile(f"header promises {n} floats, found {(len(data) - header.size) // 4}")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=header.size).astype(np.float64)
    return fields, values


# --------------------------------------------------------------------- depth
def encode_depth(depth: DepthImage) -> bytes:
    h, w = depth.data.shape
    _check_dims(w, h)
    return _DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, int(depth.scale_state)) + depth.data.astype("<f4").tobytes()


def decode_depth(data: bytes) -> DepthImage:
    (_, w, h, state), values = _read_raster(data, _DEPTH_HEADER, DEPTH_MAGIC, 1)
    if state not in (0, 1):
        raise ParseError(f"unknown scale state {state}")
    return DepthImage(values.reshape(h, w), ScaleState(state))


def write_depth(path, depth: DepthImage):
    Path(path).write_bytes(encode_depth(depth))


def read_depth(path) -> DepthImage:
    return decode_depth(Path(path).read_bytes())


# ---------------------------------------------------------------------- flow
def encode_flow(flow: FlowImage) -> bytes:
    h, w, _ = flow.data.shape
    _check_dims(w, h)
    return _FLOW_HEADER.pack(FLOW_MAGIC, w, h) + flow.data.astype("<f4").tobytes()


def decode_flow(data: bytes) -> FlowImage:
    (_, w, h), values = _read_raster(data, _FLOW_HEADER, FLOW_MAGIC, 2)
    return FlowImage(values.reshape(h, w, 2))


def write_flow(path, flow: FlowImage):
    Path(path).write_bytes(encode_flow(flow))


def read_flow(path) -> FlowImage:
    return decode_flow(Path(path).read_bytes())


# --------------------------------------------------------------------- radar
def radar_frame_to_dict(frame: RadarFrame) -> dict:
    return {
        "t": float(frame.timestamp),
        "sensor_from_world": frame.sensor_from_world.to_list(),
        "points": [[float(x) for x in row] for row in frame.as_array()],
    }


def _reject_constant(name):
    raise ValueError(f"non-finite value {name}")


def _finite(values, what, line):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"non-finite value in {what}", line)
    return arr


def radar_frame_from_dict(d: dict, line=None) -> RadarFrame:
    try:
        t = float(_finite(d["t"], "t", line))
        pose = _finite(d["sensor_from_world"], "sensor_from_world", line)
        if pose.shape != (16,):
            raise ParseError("sensor_from_world must hold 16 numbers", line)
        pts = _finite(d["points"], "points", line) if d["points"] else np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ParseError("points must be [x, y, z, vr] rows", line)
        return RadarFrame(t, RigidTransform.from_list(pose), pts[:, :3], pts[:, 3])
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid radar frame: {exc}", line) from exc


def write_radar(path, frames):
    with open(path, "w") as fh:
        for f in frames:
            fh.write(dumps(radar_frame_to_dict(f)) + "\n")


def read_radar(path) -> list[RadarFrame]:
    frames = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                d = json.loads(text, parse_constant=_reject_constant)
            except ValueError as exc:
                raise ParseError(f"{exc}", lineno) from exc
            frame = radar_frame_from_dict(d, lineno)
            if frames and not frame.timestamp > frames[-1].timestamp:
                raise NonMonotonicTimestamps(f"line {lineno}: t={frame.timestamp} does not exceed {frames[-1].timestamp}")
            frames.append(frame)
    return frames


# ---------------------------------------------------------------------- masks
def write_mask(path, mask: DynamicMask):
    h, w = mask.data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + (mask.data * 255).astype(np.uint8).tobytes())


def read_mask(path) -> DynamicMask:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise BadMagic("not a binary PGM (P5) file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    pos += 1
    if maxval > 255:
        raise ParseError("only 8-bit PGM masks are supported")
    if len(data) - pos < w * h:
        raise TruncatedFile("PGM pixel data is truncated")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return DynamicMask((pix > 0).astype(np.uint8))


# ------------------------------------------------------------------------ PLY
def write_ply(path, points, radial_velocity=None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property double x", "property double y", "property double z"]
    cols = [pts]
    if radial_velocity is not None:
        lines.append("property double vr")
        cols.append(np.asarray(radial_velocity, dtype=np.float64).reshape(-1, 1))
    lines.append("end_header")
    body = np.hstack(cols)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for row in body:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_ply(path):
    """Return ``(points, vr_or_None)`` from an ASCII PLY written by :func:`write_ply`."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise BadMagic("not a PLY file")
        props, n = [], 0
        for line in fh:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts and parts[0] == "property":
                props.append(parts[-1])
            elif parts == ["end_header"]:
                break
        rows = [list(map(float, fh.readline().split())) for _ in range(n)]
    arr = np.array(rows, dtype=np.float64).reshape(n, len(props))
    vr = arr[:, props.index("vr")] if "vr" in props else None
    return arr[:, :3], vr


# ------------------------------------------------------------ samples, misc
def write_samples(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(dumps(s.to_dict()) + "\n")


def read_samples(path) -> list[SceneFlowSample]:
    out = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                out.append(SceneFlowSample.from_dict(json.loads(text, parse_constant=_reject_constant)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"invalid sample: {exc}", lineno) from exc
    return out


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(t, parse_constant=_reject_constant) for t in fh if t.strip()]


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for k, v in enumerate(history):
            w.writerow([k, repr(float(v))])


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["loss"]) for r in rows])


def metrics_to_csv(metrics: dict) -> str:
    """Flatten a (possibly nested) metrics dict into ``metric,value`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            w.writerow([prefix, "" if obj is None or (isinstance(obj, float) and math.isnan(obj)) else obj])

    walk("", metrics)
    return buf.getvalue()


def poses_to_dict(timestamps, poses) -> list:
    return [{"t": float(t), "world_from_ego": p.to_list()} for t, p in zip(timestamps, poses)]


def poses_from_dict(records):
    return [float(r["t"]) for r in records], [RigidTransform.from_list(r["world_from_ego"]) for r in records]
