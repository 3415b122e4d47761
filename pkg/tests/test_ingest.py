import shutil

import numpy as np
import pytest

from core.ingest import initial_scene, load_dataset, project_lidar, read_frame_image
from core.maps_io import read_pfm
from core.validator import DataError
from paths import DatasetLayout


@pytest.fixture
def dataset_copy(plane_dataset, tmp_path):
    target = tmp_path / "data"
    shutil.copytree(plane_dataset, target)
    return DatasetLayout(target)


def test_load_dataset(plane_dataset, tiny_config):
    dataset = load_dataset(plane_dataset, tiny_config)
    assert len(dataset) == 2
    frame = dataset.frames[0]
    assert frame.color.shape == (16, 16, 3)
    assert frame.intensity.shape == (16, 16, 1)
    assert frame.lidar_mask.sum() > 0
    assert frame.timestamp == dataset.rig.timestamps[0]
    assert frame.priors.has_normal and frame.priors.has_material
    assert frame.priors.regions is not None and frame.priors.light_mask is not None
    assert dataset.boxes == []


def test_frame_matches_ground_truth(plane_dataset, tiny_config):
    dataset = load_dataset(plane_dataset, tiny_config)
    layout = DatasetLayout(plane_dataset)
    assert np.array_equal(dataset.frames[1].color.numpy(), read_pfm(layout.gt_map(1, "color")))


def test_missing_frame_names_the_file(dataset_copy, tiny_config):
    dataset_copy.frame_image(1, "pfm").unlink()
    dataset_copy.frame_image(1, "png").unlink()
    with pytest.raises(DataError, match="missing_file.*frame_1"):
        load_dataset(dataset_copy.root, tiny_config)


def test_png_fallback(dataset_copy):
    exact = read_frame_image(dataset_copy, 0, 16, 16)
    dataset_copy.frame_image(0, "pfm").unlink()
    approx = read_frame_image(dataset_copy, 0, 16, 16)
    assert approx.shape == (16, 16, 3)
    assert np.allclose(approx, np.clip(exact, 0.0, 1.0), atol=0.05)


def test_wrong_frame_size(dataset_copy):
    with pytest.raises(DataError, match="bad_shape"):
        read_frame_image(dataset_copy, 0, 8, 8)


def test_missing_lidar_returns(dataset_copy, tiny_config):
    dataset_copy.lidar_points(0).unlink()
    with pytest.raises(DataError, match="missing_file"):
        load_dataset(dataset_copy.root, tiny_config)


def test_missing_priors_are_tolerated(dataset_copy, tiny_config):
    shutil.rmtree(dataset_copy.priors_dir)
    dataset = load_dataset(dataset_copy.root, tiny_config)
    assert not dataset.frames[0].priors.has_normal
    assert dataset.frames[0].priors.light_mask is None


def test_project_lidar_nearest_wins(plane_template):
    rig = plane_template.rig
    pose = rig.camera_poses[0]
    forward = pose.rotation[:, 2]
    points = np.array([
        [*(pose.translation + 2.0 * forward), 0.8],
        [*(pose.translation + 1.0 * forward), 0.3],
        [*(pose.translation - 1.0 * forward), 0.9],
    ])
    intensity, mask = project_lidar(points, rig, 0)
    assert mask.sum() == 1
    (row, col, _), = np.argwhere(mask > 0)
    assert intensity[row, col, 0] == 0.3


def test_project_lidar_threshold(plane_template):
    rig = plane_template.rig
    pose = rig.camera_poses[0]
    point = np.array([[*(pose.translation + pose.rotation[:, 2]), 0.05]])
    _, mask = project_lidar(point, rig, 0, threshold=0.1)
    assert mask.sum() == 0


def test_initial_scene_from_pointcloud(plane_dataset, tiny_config):
    dataset = load_dataset(plane_dataset, tiny_config)
    scene = initial_scene(dataset, tiny_config)
    count = scene.primitive_count()
    assert 0 < count <= tiny_config.scene.point_budget
    assert scene.dynamic_nodes == []
    gaussians = scene.background
    assert np.allclose(gaussians.normals.norm(dim=-1).numpy(), 1.0)
    assert np.all(np.abs(gaussians.means[:, 2].numpy()) < 1e-2)
