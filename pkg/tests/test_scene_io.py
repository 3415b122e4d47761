import numpy as np
import pytest

from core.scene_io import (
    format_scene,
    load_illumination,
    load_rig,
    load_scene,
    parse_scene,
    read_boxes,
    read_pointcloud,
    save_illumination,
    save_rig,
    save_scene,
    write_boxes,
    write_pointcloud,
)
from core.scenegraph import Illumination, OrientedBox, Pose, instantiate
from core.validator import DataError, SceneFormatError


def test_scene_text_is_stable(tmp_path, tiny_config):
    from core.synth import SynthSpec, build_template

    template = build_template(SynthSpec("car-mockup", image_size=8, num_frames=2), tiny_config)
    text = format_scene(template.scene)
    path = tmp_path / "scene.txt"
    save_scene(path, template.scene)
    loaded = load_scene(path)
    assert format_scene(loaded) == text
    t = template.rig.timestamps[1]
    assert np.array_equal(instantiate(loaded, t).means.numpy(), instantiate(template.scene, t).means.numpy())


def test_scene_header_required():
    with pytest.raises(SceneFormatError, match="header"):
        parse_scene("not a scene\n")


def test_truncated_scene_reports_line(tiny_config):
    from core.synth import SynthSpec, build_template

    text = format_scene(build_template(SynthSpec("lambertian-plane", image_size=8, num_frames=1), tiny_config).scene)
    lines = text.splitlines()
    with pytest.raises(SceneFormatError):
        parse_scene("\n".join(lines[:10]) + "\n", "cut.txt")


def test_pointcloud_records(tmp_path):
    points = np.array([[0.5, -1.25, 2.0, 0.75], [1.0, 2.0, 3.0, 0.0]])
    path = tmp_path / "frame_0.bin"
    write_pointcloud(path, points)
    assert path.stat().st_size == 16 + 2 * 16
    assert np.array_equal(read_pointcloud(path), points)


def test_pointcloud_count_mismatch(tmp_path):
    path = tmp_path / "bad.bin"
    write_pointcloud(path, np.zeros((3, 4)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(SceneFormatError, match="header declares 3"):
        read_pointcloud(path)


def test_missing_pointcloud_is_data_error(tmp_path):
    with pytest.raises(DataError, match="missing_file"):
        read_pointcloud(tmp_path / "absent.bin")


def test_boxes_file(tmp_path):
    box = OrientedBox("car", np.array([1.0, 2.0, 0.5]), np.array([4.0, 2.0, 1.5]), 0.25,
                      [(0.0, Pose.from_yaw(0.25, (1.0, 2.0, 0.5))), (0.1, Pose.from_yaw(0.5, (1.5, 2.0, 0.5)))])
    path = tmp_path / "boxes.txt"
    write_boxes(path, [box])
    (loaded,) = read_boxes(path)
    assert loaded.name == "car"
    assert loaded.yaw == 0.25
    assert [t for t, _ in loaded.keyframes] == [0.0, 0.1]
    assert np.allclose(loaded.keyframes[1][1].rotation, Pose.from_yaw(0.5, (0, 0, 0)).rotation)


def test_rig_files(tmp_path, plane_template):
    rig = plane_template.rig
    save_rig(tmp_path / "rig.json", tmp_path / "poses.txt", rig)
    loaded = load_rig(tmp_path / "rig.json", tmp_path / "poses.txt")
    assert loaded.timestamps == rig.timestamps
    assert loaded.camera == rig.camera
    assert loaded.lidar.elevations_deg == rig.lidar.elevations_deg
    for a, b in zip(loaded.camera_poses, rig.camera_poses):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)


def test_pose_table_column_count(tmp_path, plane_template):
    save_rig(tmp_path / "rig.json", tmp_path / "poses.txt", plane_template.rig)
    (tmp_path / "poses.txt").write_text("0 0.0 1 0 0\n")
    with pytest.raises(DataError, match="26 columns"):
        load_rig(tmp_path / "rig.json", tmp_path / "poses.txt")


def test_illumination_file(tmp_path):
    illum = Illumination.constant_sky(0.3, sun_direction=(0.0, 0.6, 0.8), sun_intensity=(1.0, 2.0, 3.0))
    path = tmp_path / "illum.json"
    save_illumination(path, illum)
    loaded = load_illumination(path)
    assert np.allclose(loaded.sky_sh.numpy(), illum.sky_sh.numpy())
    assert np.allclose(loaded.sun_direction.numpy(), [0.0, 0.6, 0.8])


def test_illumination_shape_checked(tmp_path):
    path = tmp_path / "illum.json"
    path.write_text('{"sky_sh": [[1, 2, 3]]}')
    with pytest.raises(DataError, match="16x3"):
        load_illumination(path)
