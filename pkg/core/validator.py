"""
Validate configs, datasets and scene invariants; define the error hierarchy.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

if TYPE_CHECKING:
    from core.scenegraph import SceneGraph, SensorRig

# Exit status constants
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# Validation failure reason constants
FAILURE_MISSING_FILE = "missing_file"
FAILURE_BAD_SHAPE = "bad_shape"
FAILURE_OUT_OF_RANGE = "out_of_range"
FAILURE_NOT_UNIT = "not_unit_norm"
FAILURE_OVER_BUDGET = "over_budget"

UNIT_NORM_TOL = 1e-6
ROTATION_TOL = 1e-6


class InvrlError(RuntimeError):
    """Base class for every error the pipeline reports to the user."""

    exit_code = EXIT_DATA


class ConfigError(InvrlError):
    """Raised when a config file or CLI override is invalid."""

    exit_code = EXIT_CONFIG


class DataError(InvrlError):
    """Raised when an input file is missing or malformed. Always names the file."""

    exit_code = EXIT_DATA


class OutOfRangeError(DataError):
    """Raised when a timestamp lies outside a dynamic node's trajectory."""


class SceneFormatError(DataError):
    """Raised when a scene, point cloud or box file cannot be parsed."""


class NumericError(InvrlError):
    """Raised when an optimisation produces a non-finite value."""

    exit_code = EXIT_NUMERIC


def require_file(path: str | Path, what: str = "file") -> Path:
    """Return path if it exists, otherwise raise DataError naming it."""
    file_path = Path(path)
    if not file_path.exists():
        raise DataError(f"{FAILURE_MISSING_FILE}: {what} not found: {file_path}")
    return file_path


def validate_rotation(matrix: np.ndarray, label: str) -> None:
    """Orthonormal with det = +1 within ROTATION_TOL."""
    rot = np.asarray(matrix, dtype=np.float64)
    if rot.shape != (3, 3):
        raise DataError(f"{FAILURE_BAD_SHAPE}: {label} rotation must be 3x3, got {rot.shape}")
    if not np.allclose(rot @ rot.T, np.eye(3), atol=ROTATION_TOL):
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: {label} rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: {label} rotation has det != +1")


def validate_timestamps(timestamps: Iterable[float], label: str) -> None:
    """Timestamps must be strictly increasing."""
    values = np.asarray(list(timestamps), dtype=np.float64)
    if values.size == 0:
        raise DataError(f"{FAILURE_BAD_SHAPE}: {label} has no keyframes")
    if values.size > 1 and not np.all(np.diff(values) > 0):
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: {label} timestamps must be strictly increasing")


def validate_scene(scene: "SceneGraph") -> None:
    """
    Check the scene-graph invariants.

    - primitive count within the point budget
    - unit normals and sun direction
    - bounded material fields inside [0, 1]
    - 16 SH coefficients per channel
    """
    total = scene.primitive_count()
    if total > scene.point_budget:
        raise DataError(
            f"{FAILURE_OVER_BUDGET}: scene holds {total} primitives, budget is {scene.point_budget}"
        )

    sky = scene.illumination.sky_sh
    if tuple(sky.shape) != (16, 3):
        raise DataError(f"{FAILURE_BAD_SHAPE}: sky SH must be 16x3, got {tuple(sky.shape)}")
    sun = scene.illumination.sun_direction.detach().cpu().numpy()
    if abs(np.linalg.norm(sun) - 1.0) > UNIT_NORM_TOL:
        raise DataError(f"{FAILURE_NOT_UNIT}: sun direction is not unit length")
    if np.any(scene.illumination.sun_intensity.detach().cpu().numpy() < 0):
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: sun intensity must be non-negative")

    sets = [("background", scene.background)]
    sets += [(node.name, node.gaussians) for node in scene.dynamic_nodes]
    for label, gaussians in sets:
        _validate_gaussians(gaussians, label)
    for node in scene.dynamic_nodes:
        node.trajectory.validate(node.name)


def _validate_gaussians(gaussians, label: str) -> None:
    if len(gaussians) == 0:
        return
    normals = gaussians.normals.detach().cpu().numpy()
    if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > UNIT_NORM_TOL):
        raise DataError(f"{FAILURE_NOT_UNIT}: {label} has non-unit normals")
    if np.any(gaussians.scales.detach().cpu().numpy() <= 0):
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: {label} has non-positive scales")
    for field in ("opacities", "roughness", "lidar_albedo", "rgb_albedo", "sun_visibility"):
        values = getattr(gaussians, field).detach().cpu().numpy()
        if np.any(values < 0) or np.any(values > 1):
            raise DataError(f"{FAILURE_OUT_OF_RANGE}: {label} field '{field}' leaves [0, 1]")


def validate_rig(rig: "SensorRig") -> None:
    """Positive image size and focal lengths; camera and LiDAR poses per frame."""
    cam = rig.camera
    if cam.width <= 0 or cam.height <= 0:
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: image size must be positive")
    if cam.fx <= 0 or cam.fy <= 0:
        raise DataError(f"{FAILURE_OUT_OF_RANGE}: focal lengths must be positive")
    n_frames = len(rig.timestamps)
    if len(rig.camera_poses) != n_frames or len(rig.lidar_poses) != n_frames:
        raise DataError(
            f"{FAILURE_BAD_SHAPE}: camera and LiDAR poses must share the timestamp index set"
        )
    validate_timestamps(rig.timestamps, "rig")
    for idx, pose in enumerate(rig.camera_poses):
        validate_rotation(pose.rotation, f"camera frame {idx}")
    for idx, pose in enumerate(rig.lidar_poses):
        validate_rotation(pose.rotation, f"lidar frame {idx}")
    if len(rig.lidar.elevations_deg) == 0:
        raise DataError(f"{FAILURE_BAD_SHAPE}: LiDAR beam table is empty")


def validate_map_shape(name: str, array: np.ndarray, height: int, width: int, channels: int, path: Path | None = None) -> None:
    """Raise DataError when a loaded map does not match the training image size."""
    expected = (height, width, channels)
    if tuple(array.shape) != expected:
        where = f" in '{path}'" if path is not None else ""
        raise DataError(f"{FAILURE_BAD_SHAPE}: {name}{where} has shape {tuple(array.shape)}, expected {expected}")
