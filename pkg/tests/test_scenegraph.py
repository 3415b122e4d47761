import math

import numpy as np
import pytest
import torch

from core.scenegraph import (
    DynamicNode,
    GaussianSet,
    OrientedBox,
    Pose,
    SceneGraph,
    Trajectory,
    init_from_pointcloud,
    instantiate,
    owner_index,
    quat_to_matrix,
    quaternion_from_normal,
)
from core.validator import DataError, OutOfRangeError


def _moving_scene() -> SceneGraph:
    background = GaussianSet.create(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    local = GaussianSet.create(np.array([[1.0, 0.0, 0.0]]), normals=np.array([[1.0, 0.0, 0.0]]))
    traj = Trajectory(
        np.array([0.0, 1.0]),
        [Pose.from_yaw(0.0, (0.0, 0.0, 0.0)), Pose.from_yaw(math.pi / 2, (2.0, 0.0, 0.0))],
    )
    return SceneGraph(background, [DynamicNode("car", local, traj)])


def test_static_background_passes_through():
    scene = _moving_scene()
    world = instantiate(scene, 0.5)
    assert torch.equal(world.means[:2], scene.background.means)
    assert torch.equal(world.normals[:2], scene.background.normals)


def test_keyframe_pose_is_exact():
    world = instantiate(_moving_scene(), 1.0)
    assert torch.allclose(world.means[2], torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(world.normals[2], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)


def test_interpolation_lerps_and_slerps():
    world = instantiate(_moving_scene(), 0.5)
    c = math.cos(math.pi / 4)
    expected = np.array([1.0 + c, c, 0.0])
    assert np.allclose(world.means[2].numpy(), expected, atol=1e-12)
    assert np.allclose(world.normals[2].numpy(), [c, c, 0.0], atol=1e-12)


def test_storage_order_and_owners():
    scene = _moving_scene()
    assert len(instantiate(scene, 0.0)) == 3
    assert owner_index(scene).tolist() == [-1, -1, 0]


def test_timestamp_outside_trajectory():
    with pytest.raises(OutOfRangeError, match="car"):
        instantiate(_moving_scene(), 1.5)


def test_look_at_axes():
    pose = Pose.look_at((0.0, 0.0, 2.0), (1.0, 0.0, 2.0))
    assert np.allclose(pose.rotation[:, 2], [1.0, 0.0, 0.0])
    assert np.allclose(pose.rotation[:, 1], [0.0, 0.0, -1.0])
    assert np.isclose(np.linalg.det(pose.rotation), 1.0)


def test_covariances_are_spd():
    rng = np.random.default_rng(0)
    quats = rng.normal(size=(8, 4))
    g = GaussianSet.create(rng.normal(size=(8, 3)), scales=rng.uniform(0.01, 0.5, size=(8, 3)), rotations=quats)
    eig = torch.linalg.eigvalsh(g.covariances())
    assert torch.all(eig > 0)


def test_quaternion_from_normal_maps_z_onto_normal():
    normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.3, -0.4, 0.866]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    rot = quat_to_matrix(torch.as_tensor(quaternion_from_normal(normals))).numpy()
    assert np.allclose(rot[:, :, 2], normals, atol=1e-12)


def _cloud(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-1.0, 1.0, size=(n, 3))
    return np.concatenate([xyz, rng.uniform(0.0, 1.2, size=(n, 1))], axis=1)


def test_init_respects_budget_and_is_seeded():
    a = init_from_pointcloud(_cloud(500), budget=100, seed=3)
    b = init_from_pointcloud(_cloud(500), budget=100, seed=3)
    assert a.primitive_count() == 100
    assert torch.equal(a.background.means, b.background.means)


def test_init_material_defaults():
    scene = init_from_pointcloud(_cloud(50), init_opacity=0.5, init_roughness=0.5)
    g = scene.background
    assert torch.all(g.opacities == 0.5)
    assert torch.all(g.roughness == 0.5)
    assert torch.all((g.lidar_albedo >= 0) & (g.lidar_albedo <= 1))
    assert torch.allclose(g.normals.norm(dim=-1), torch.ones(50, dtype=torch.float64))


def test_init_normals_face_the_sensor():
    cloud = _cloud(40)
    origin = np.array([0.0, 0.0, 5.0])
    scene = init_from_pointcloud(cloud, sensor_origin=origin)
    toward = origin - cloud[:, :3]
    assert np.all(np.einsum("ni,ni->n", scene.background.normals.numpy(), toward) > 0)


def test_duplicate_points_get_scale_floor():
    cloud = np.zeros((4, 4))
    scene = init_from_pointcloud(cloud, min_init_scale=1e-3)
    assert torch.allclose(scene.background.scales, torch.full((4, 3), 1e-3, dtype=torch.float64))


def test_boxes_become_dynamic_nodes():
    cloud = _cloud(200)
    box = OrientedBox("obj", np.zeros(3), np.array([0.8, 0.8, 0.8]), 0.0, [(0.0, Pose.identity()), (1.0, Pose.identity())])
    scene = init_from_pointcloud(cloud, boxes=[box], per_object_budget=10)
    inside = int(box.contains(cloud[:, :3]).sum())
    assert len(scene.dynamic_nodes) == 1
    assert len(scene.dynamic_nodes[0].gaussians) == min(inside, 10)
    assert len(scene.background) == 200 - inside


def test_empty_cloud_raises():
    with pytest.raises(DataError):
        init_from_pointcloud(np.zeros((0, 4)))
