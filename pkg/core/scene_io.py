"""
Text and binary formats for scenes, point clouds, boxes, rigs and illumination.

Floats are written with repr() so a parse/format cycle is byte-identical.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from core.ledger import atomic_rewrite_json, atomic_write_bytes, atomic_write_text, read_json
from core.scenegraph import (
    DTYPE,
    SH_COEFFS,
    CameraIntrinsics,
    DynamicNode,
    GaussianSet,
    Illumination,
    LidarSpec,
    OrientedBox,
    Pose,
    SceneGraph,
    SensorRig,
    Trajectory,
)
from core.validator import DataError, SceneFormatError, require_file

logger = logging.getLogger(__name__)

SCENE_HEADER = "invrl-scene v1"
BOXES_HEADER = "invrl-boxes v1"
POINTCLOUD_MAGIC = b"INVRLPC1"
POINT_RECORD = np.dtype("<f4")

# Column order of one "g" line.
PRIMITIVE_LAYOUT: tuple[tuple[str, int], ...] = (
    ("means", 3),
    ("scales", 3),
    ("rotations", 4),
    ("opacities", 1),
    ("colors", 3),
    ("normals", 3),
    ("rgb_albedo", 3),
    ("roughness", 1),
    ("lidar_albedo", 1),
    ("sun_visibility", 1),
)
PRIMITIVE_WIDTH = sum(width for _, width in PRIMITIVE_LAYOUT)


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _gaussian_rows(gaussians: GaussianSet) -> np.ndarray:
    columns = []
    for name, width in PRIMITIVE_LAYOUT:
        values = getattr(gaussians, name).detach().cpu().numpy()
        columns.append(values.reshape(len(gaussians), width))
    if not columns:
        return np.zeros((0, PRIMITIVE_WIDTH))
    return np.concatenate(columns, axis=1)


def _gaussians_from_rows(rows: np.ndarray) -> GaussianSet:
    fields = {}
    offset = 0
    for name, width in PRIMITIVE_LAYOUT:
        block = torch.as_tensor(rows[:, offset:offset + width], dtype=DTYPE)
        fields[name] = block[:, 0].clone() if width == 1 else block.clone()
        offset += width
    return GaussianSet(**fields)


def format_scene(scene: SceneGraph) -> str:
    """Serialize a scene graph to the versioned text format."""
    illum = scene.illumination
    lines = [
        SCENE_HEADER,
        f"point_budget {int(scene.point_budget)}",
        f"sky {_fmt(illum.sky_sh.detach().cpu().numpy().reshape(-1))}",
        f"sun_direction {_fmt(illum.sun_direction.detach().cpu().numpy())}",
        f"sun_intensity {_fmt(illum.sun_intensity.detach().cpu().numpy())}",
        f"background {len(scene.background)}",
    ]
    lines += [f"g {_fmt(row)}" for row in _gaussian_rows(scene.background)]
    for node in scene.dynamic_nodes:
        traj = node.trajectory
        lines.append(f"node {node.name} {len(node.gaussians)} {len(traj.timestamps)}")
        for t, pose in zip(traj.timestamps, traj.poses):
            lines.append(f"key {_fmt([t])} {_fmt(pose.rotation.reshape(-1))} {_fmt(pose.translation)}")
        lines += [f"g {_fmt(row)}" for row in _gaussian_rows(node.gaussians)]
    lines.append("end")
    return "\n".join(lines) + "\n"


class _Lines:
    """Line cursor that reports file and line number on parse failures."""

    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.pos = 0
        self.source = source

    def fail(self, message: str) -> SceneFormatError:
        return SceneFormatError(f"{self.source}:{self.pos}: {message}")

    def next(self, keyword: str) -> list[str]:
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        if self.pos >= len(self.lines):
            raise self.fail(f"unexpected end of file, expected '{keyword}'")
        tokens = self.lines[self.pos].split()
        self.pos += 1
        if tokens[0] != keyword:
            raise self.fail(f"expected '{keyword}', found '{tokens[0]}'")
        return tokens[1:]

    def floats(self, keyword: str, count: int) -> list[float]:
        tokens = self.next(keyword)
        if len(tokens) != count:
            raise self.fail(f"'{keyword}' expects {count} values, got {len(tokens)}")
        try:
            return [float(tok) for tok in tokens]
        except ValueError as exc:
            raise self.fail(f"non-numeric value in '{keyword}'") from exc

    def ints(self, keyword: str, count: int) -> list[int]:
        tokens = self.next(keyword)
        if len(tokens) != count:
            raise self.fail(f"'{keyword}' expects {count} values, got {len(tokens)}")
        try:
            return [int(tok) for tok in tokens]
        except ValueError as exc:
            raise self.fail(f"non-integer value in '{keyword}'") from exc

    def gaussians(self, count: int) -> GaussianSet:
        rows = np.array([self.floats("g", PRIMITIVE_WIDTH) for _ in range(count)], dtype=np.float64)
        return _gaussians_from_rows(rows.reshape(count, PRIMITIVE_WIDTH))


def parse_scene(text: str, source: str = "<scene>") -> SceneGraph:
    """Parse the versioned scene text format.

    Raises:
        SceneFormatError: On a wrong header, truncated content or bad numbers.
    """
    cursor = _Lines(text, source)
    if not cursor.lines or cursor.lines[0].strip() != SCENE_HEADER:
        raise SceneFormatError(f"{source}: missing '{SCENE_HEADER}' header")
    cursor.pos = 1
    (budget,) = cursor.ints("point_budget", 1)
    sky = np.array(cursor.floats("sky", SH_COEFFS * 3)).reshape(SH_COEFFS, 3)
    sun_dir = cursor.floats("sun_direction", 3)
    sun_int = cursor.floats("sun_intensity", 3)
    (n_background,) = cursor.ints("background", 1)
    background = cursor.gaussians(n_background)

    nodes: list[DynamicNode] = []
    while True:
        while cursor.pos < len(cursor.lines) and not cursor.lines[cursor.pos].strip():
            cursor.pos += 1
        if cursor.pos >= len(cursor.lines):
            raise cursor.fail("unexpected end of file, expected 'end'")
        head = cursor.lines[cursor.pos].split()
        if head[0] == "end":
            break
        tokens = cursor.next("node")
        if len(tokens) != 3:
            raise cursor.fail("'node' expects: name count keyframes")
        name = tokens[0]
        try:
            count, n_keys = int(tokens[1]), int(tokens[2])
        except ValueError as exc:
            raise cursor.fail("non-integer count in 'node'") from exc
        times, poses = [], []
        for _ in range(n_keys):
            values = cursor.floats("key", 13)
            times.append(values[0])
            poses.append(Pose(np.array(values[1:10]).reshape(3, 3), np.array(values[10:13])))
        nodes.append(DynamicNode(name, cursor.gaussians(count), Trajectory(np.array(times), poses)))

    illumination = Illumination(
        sky_sh=torch.as_tensor(sky, dtype=DTYPE),
        sun_direction=torch.as_tensor(np.array(sun_dir), dtype=DTYPE),
        sun_intensity=torch.as_tensor(np.array(sun_int), dtype=DTYPE),
    )
    return SceneGraph(background=background, dynamic_nodes=nodes, illumination=illumination, point_budget=budget)


def save_scene(path: str | Path, scene: SceneGraph) -> None:
    atomic_write_text(path, format_scene(scene))


def load_scene(path: str | Path) -> SceneGraph:
    scene_path = require_file(path, "scene file")
    return parse_scene(scene_path.read_text(encoding="utf-8"), str(scene_path))


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def encode_pointcloud(points: np.ndarray) -> bytes:
    records = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 4).astype(POINT_RECORD))
    return POINTCLOUD_MAGIC + struct.pack("<Q", records.shape[0]) + records.tobytes()


def write_pointcloud(path: str | Path, points: np.ndarray) -> None:
    """Write (x, y, z, intensity) float32 records behind a 16-byte header."""
    atomic_write_bytes(path, encode_pointcloud(points))


def read_pointcloud(path: str | Path) -> np.ndarray:
    """Read a point cloud as an (N, 4) float64 array."""
    cloud_path = require_file(path, "point cloud")
    payload = cloud_path.read_bytes()
    if len(payload) < 16 or payload[:8] != POINTCLOUD_MAGIC:
        raise SceneFormatError(f"{cloud_path}: missing point cloud magic header")
    (count,) = struct.unpack("<Q", payload[8:16])
    expected = count * 4 * POINT_RECORD.itemsize
    if len(payload) - 16 != expected:
        raise SceneFormatError(
            f"{cloud_path}: header declares {count} points but payload holds {len(payload) - 16} bytes"
        )
    return np.frombuffer(payload, dtype=POINT_RECORD, offset=16).reshape(count, 4).astype(np.float64)


# ---------------------------------------------------------------------------
# oriented boxes
# ---------------------------------------------------------------------------


def format_boxes(boxes: Sequence[OrientedBox]) -> str:
    lines = [BOXES_HEADER]
    for box in boxes:
        lines.append(f"box {box.name} {_fmt(box.center)} {_fmt(box.size)} {_fmt([box.yaw])}")
        for t, pose in box.keyframes:
            yaw = float(np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0]))
            lines.append(f"pose {_fmt([t])} {_fmt(pose.translation)} {_fmt([yaw])}")
    return "\n".join(lines) + "\n"


def write_boxes(path: str | Path, boxes: Sequence[OrientedBox]) -> None:
    atomic_write_text(path, format_boxes(boxes))


def read_boxes(path: str | Path) -> list[OrientedBox]:
    """Parse box lines (centre, size, yaw) each followed by its pose lines."""
    boxes_path = require_file(path, "boxes file")
    lines = boxes_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != BOXES_HEADER:
        raise SceneFormatError(f"{boxes_path}: missing '{BOXES_HEADER}' header")
    boxes: list[OrientedBox] = []
    for line_no, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        try:
            if tokens[0] == "box" and len(tokens) == 9:
                values = [float(tok) for tok in tokens[2:]]
                boxes.append(OrientedBox(tokens[1], np.array(values[0:3]), np.array(values[3:6]), values[6]))
            elif tokens[0] == "pose" and len(tokens) == 6:
                if not boxes:
                    raise SceneFormatError(f"{boxes_path}:{line_no}: pose before any box")
                t, tx, ty, tz, yaw = (float(tok) for tok in tokens[1:])
                boxes[-1].keyframes.append((t, Pose.from_yaw(yaw, (tx, ty, tz))))
            else:
                raise SceneFormatError(f"{boxes_path}:{line_no}: unrecognised line '{line.strip()}'")
        except ValueError as exc:
            raise SceneFormatError(f"{boxes_path}:{line_no}: non-numeric value") from exc
    return boxes


# ---------------------------------------------------------------------------
# sensor rig
# ---------------------------------------------------------------------------


def save_rig(rig_path: str | Path, poses_path: str | Path, rig: SensorRig) -> None:
    cam = rig.camera
    lidar = rig.lidar
    atomic_rewrite_json(rig_path, {
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height},
        "lidar": {
            "elevations_deg": list(lidar.elevations_deg),
            "azimuth_step_deg": lidar.azimuth_step_deg,
            "azimuth_min_deg": lidar.azimuth_min_deg,
            "azimuth_max_deg": lidar.azimuth_max_deg,
            "elevation_min_deg": lidar.elevation_min_deg,
            "elevation_max_deg": lidar.elevation_max_deg,
            "emitted_power": lidar.emitted_power,
        },
    })
    lines = ["# idx t camera[R(9) t(3)] lidar[R(9) t(3)]"]
    for idx, (t, cam_pose, lidar_pose) in enumerate(zip(rig.timestamps, rig.camera_poses, rig.lidar_poses)):
        lines.append(
            f"{idx} {_fmt([t])} "
            f"{_fmt(cam_pose.rotation.reshape(-1))} {_fmt(cam_pose.translation)} "
            f"{_fmt(lidar_pose.rotation.reshape(-1))} {_fmt(lidar_pose.translation)}"
        )
    atomic_write_text(poses_path, "\n".join(lines) + "\n")


def load_rig(rig_path: str | Path, poses_path: str | Path) -> SensorRig:
    """Load rig.json intrinsics and beam table plus the per-frame pose table."""
    rig_file = require_file(rig_path, "rig description")
    poses_file = require_file(poses_path, "pose table")
    payload = read_json(rig_file)
    try:
        cam = payload["camera"]
        camera = CameraIntrinsics(
            fx=float(cam["fx"]), fy=float(cam["fy"]), cx=float(cam["cx"]), cy=float(cam["cy"]),
            width=int(cam["width"]), height=int(cam["height"]),
        )
        lid = payload["lidar"]
        lidar = LidarSpec(
            elevations_deg=[float(e) for e in lid["elevations_deg"]],
            azimuth_step_deg=float(lid["azimuth_step_deg"]),
            azimuth_min_deg=float(lid.get("azimuth_min_deg", -180.0)),
            azimuth_max_deg=float(lid.get("azimuth_max_deg", 180.0)),
            elevation_min_deg=float(lid.get("elevation_min_deg", -90.0)),
            elevation_max_deg=float(lid.get("elevation_max_deg", 90.0)),
            emitted_power=float(lid.get("emitted_power", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{rig_file}: malformed rig description ({exc})") from exc

    timestamps: list[float] = []
    camera_poses: list[Pose] = []
    lidar_poses: list[Pose] = []
    for line_no, line in enumerate(poses_file.read_text(encoding="utf-8").splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) != 26:
            raise DataError(f"{poses_file}:{line_no}: expected 26 columns, got {len(tokens)}")
        try:
            idx = int(tokens[0])
            values = [float(tok) for tok in tokens[1:]]
        except ValueError as exc:
            raise DataError(f"{poses_file}:{line_no}: non-numeric value") from exc
        if idx != len(timestamps):
            raise DataError(f"{poses_file}:{line_no}: frame index {idx} out of sequence")
        timestamps.append(values[0])
        camera_poses.append(Pose(np.array(values[1:10]).reshape(3, 3), np.array(values[10:13])))
        lidar_poses.append(Pose(np.array(values[13:22]).reshape(3, 3), np.array(values[22:25])))
    if not timestamps:
        raise DataError(f"{poses_file}: pose table is empty")
    return SensorRig(camera, lidar, timestamps, camera_poses, lidar_poses)


# ---------------------------------------------------------------------------
# illumination
# ---------------------------------------------------------------------------


def illumination_to_dict(illum: Illumination) -> dict:
    return {
        "sky_sh": illum.sky_sh.detach().cpu().numpy().tolist(),
        "sun_direction": illum.sun_direction.detach().cpu().numpy().tolist(),
        "sun_intensity": illum.sun_intensity.detach().cpu().numpy().tolist(),
    }


def save_illumination(path: str | Path, illum: Illumination) -> None:
    atomic_rewrite_json(path, illumination_to_dict(illum))


def load_illumination(path: str | Path) -> Illumination:
    """Read an illumination JSON document: sky_sh (16x3), sun_direction, sun_intensity."""
    illum_path = require_file(path, "illumination file")
    payload = read_json(illum_path)
    try:
        sky = np.asarray(payload.get("sky_sh", np.zeros((SH_COEFFS, 3))), dtype=np.float64)
        direction = np.asarray(payload.get("sun_direction", [0.0, 0.0, 1.0]), dtype=np.float64)
        intensity = np.asarray(payload.get("sun_intensity", [0.0, 0.0, 0.0]), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{illum_path}: malformed illumination ({exc})") from exc
    if sky.shape != (SH_COEFFS, 3) or direction.shape != (3,) or intensity.shape != (3,):
        raise DataError(f"{illum_path}: sky_sh must be 16x3 and sun vectors 3-long")
    if np.linalg.norm(direction) == 0:
        raise DataError(f"{illum_path}: sun_direction must be non-zero")
    return Illumination.create(sky, direction, intensity)
