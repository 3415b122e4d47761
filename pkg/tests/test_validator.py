import numpy as np
import pytest
import torch

from core.scenegraph import GaussianSet, Illumination, SceneGraph
from core.validator import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERIC,
    ConfigError,
    DataError,
    NumericError,
    OutOfRangeError,
    SceneFormatError,
    require_file,
    validate_map_shape,
    validate_rotation,
    validate_scene,
    validate_timestamps,
)


def _scene(n: int = 3, budget: int = 10) -> SceneGraph:
    return SceneGraph(GaussianSet.create(np.zeros((n, 3))), [], Illumination.create(), budget)


def test_exit_codes():
    assert ConfigError.exit_code == EXIT_CONFIG == 2
    assert DataError.exit_code == EXIT_DATA == 3
    assert NumericError.exit_code == EXIT_NUMERIC == 4
    assert issubclass(OutOfRangeError, DataError)
    assert issubclass(SceneFormatError, DataError)


def test_require_file_names_the_path(tmp_path):
    missing = tmp_path / "frame_0.pfm"
    with pytest.raises(DataError, match="frame_0.pfm"):
        require_file(missing, "frame image")


def test_rotation_checks():
    validate_rotation(np.eye(3), "ok")
    with pytest.raises(DataError):
        validate_rotation(2 * np.eye(3), "scaled")
    with pytest.raises(DataError):
        validate_rotation(np.diag([1.0, 1.0, -1.0]), "reflection")


def test_timestamps_strictly_increasing():
    validate_timestamps([0.0, 0.1, 0.2], "rig")
    with pytest.raises(DataError):
        validate_timestamps([0.0, 0.0], "rig")
    with pytest.raises(DataError):
        validate_timestamps([], "rig")


def test_valid_scene_passes():
    validate_scene(_scene())


def test_over_budget():
    with pytest.raises(DataError, match="over_budget"):
        validate_scene(_scene(n=5, budget=4))


def test_non_unit_normals():
    scene = _scene()
    scene.background.normals = torch.full((3, 3), 1.0, dtype=torch.float64)
    with pytest.raises(DataError, match="not_unit_norm"):
        validate_scene(scene)


def test_material_out_of_range():
    scene = _scene()
    scene.background.lidar_albedo = torch.tensor([0.2, 1.5, 0.3], dtype=torch.float64)
    with pytest.raises(DataError, match="lidar_albedo"):
        validate_scene(scene)


def test_map_shape():
    validate_map_shape("prior", np.zeros((4, 5, 3)), 4, 5, 3)
    with pytest.raises(DataError, match="bad_shape"):
        validate_map_shape("prior", np.zeros((4, 4, 3)), 4, 5, 3)
