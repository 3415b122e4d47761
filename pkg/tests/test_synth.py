import json
import math

import numpy as np
import pytest
import torch

from core.render import render_frame, shade
from core.scene_io import load_scene
from core.scenegraph import Illumination, instantiate
from core.synth import (
    RELIGHT_NOON,
    TEMPLATES,
    Spotlight,
    SynthSpec,
    build_template,
    direct_lighting_reference,
    generate,
    insert_node,
    load_spotlights,
    make_priors,
    night_sim,
    relight,
    render_ground_truth,
    spotlight_radiance,
)
from core.scenegraph import GaussianSet
from core.validator import ConfigError, DataError
from core.visibility import hemisphere_directions
from paths import DatasetLayout


def test_template_ids():
    assert set(TEMPLATES) == {"lambertian-plane", "shadow-pole", "wall-vs-whiteboard", "relight-pair", "car-mockup", "box-plane"}


def test_unknown_template(tiny_config):
    with pytest.raises(ConfigError, match="Unknown template 'teapot'"):
        build_template(SynthSpec("teapot"), tiny_config)
    with pytest.raises(ConfigError):
        build_template(SynthSpec("lambertian-plane", image_size=2), tiny_config)


def test_generate_writes_dataset(plane_dataset):
    layout = DatasetLayout(plane_dataset)
    for idx in range(2):
        assert layout.frame_image(idx).exists()
        assert layout.lidar_points(idx).exists()
        for kind in ("color", "albedo", "rough", "lidar_albedo", "intensity", "mask", "normal"):
            assert layout.gt_map(idx, kind).exists(), kind
        for kind in ("normal", "albedo", "rough"):
            assert layout.prior_map(idx, kind).exists(), kind
        assert layout.light_mask(idx).exists()
        assert layout.regions(idx).exists()
    assert layout.pointcloud_path.exists()
    assert (layout.gt_dir / "illumination.json").exists()
    spec_text = layout.spec_path.read_text()
    assert "template = lambertian-plane" in spec_text
    assert "1 = ground" in spec_text
    scene = load_scene(layout.gt_scene_path)
    assert scene.primitive_count() > 0


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_is_deterministic_across_thread_caps(tmp_path, tiny_config, monkeypatch):
    spec = SynthSpec("shadow-pole", image_size=8, num_frames=3, noise=0.5, seed=4)
    monkeypatch.setenv("INVRL_THREADS", "1")
    generate(spec, tmp_path / "a", tiny_config)
    monkeypatch.setenv("INVRL_THREADS", "3")
    generate(spec, tmp_path / "b", tiny_config)
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[name] == b[name] for name in a)


def test_relight_pair_writes_alternate_colour(tmp_path, tiny_config):
    layout = generate(SynthSpec("relight-pair", image_size=8, num_frames=1), tmp_path, tiny_config)
    assert layout.gt_map(0, "color_alt").exists()
    assert (layout.gt_dir / "illumination_alt.json").exists()


def test_relight_keeps_materials_and_rebakes_shadows(tiny_config):
    template = build_template(SynthSpec("relight-pair", image_size=8, num_frames=1), tiny_config)
    scene = template.scene
    before = scene.background.sun_visibility.clone()
    relit = relight(scene, RELIGHT_NOON, tiny_config)
    for name in ("means", "rgb_albedo", "roughness", "lidar_albedo"):
        assert torch.equal(getattr(relit.background, name), getattr(scene.background, name))
    assert torch.equal(relit.illumination.sky_sh, RELIGHT_NOON.sky_sh)
    assert torch.equal(scene.background.sun_visibility, before)
    # the low morning sun throws a longer shadow across the ground
    ground = torch.as_tensor(template.labels == 1)
    shadowed_morning = int((before[ground] == 0).sum())
    shadowed_noon = int((relit.background.sun_visibility[ground] == 0).sum())
    assert shadowed_noon < shadowed_morning


def test_double_relight_swap_is_bit_identical(tiny_config):
    template = build_template(SynthSpec("relight-pair", image_size=8, num_frames=1), tiny_config)
    scene, rig = template.scene, template.rig
    t0 = rig.timestamps[0]
    there = relight(scene, template.alt_illumination, tiny_config, t0)
    back = relight(there, scene.illumination, tiny_config, t0)
    original, swapped = instantiate(scene, t0), instantiate(back, t0)
    for name in ("means", "rgb_albedo", "lidar_albedo", "roughness", "sun_visibility"):
        assert torch.equal(getattr(swapped, name), getattr(original, name)), name
    assert torch.equal(back.illumination.sun_direction, scene.illumination.sun_direction)
    first = render_frame(scene, rig, t0, "final", tiny_config)
    second = render_frame(back, rig, t0, "final", tiny_config)
    assert torch.equal(first.color, second.color)


def test_insert_node(tiny_config, plane_template):
    car = build_template(SynthSpec("car-mockup", image_size=8, num_frames=2), tiny_config)
    dst = plane_template.scene
    times = plane_template.rig.timestamps
    out = insert_node(car.scene, 0, dst, offset=(1.0, 0.0, 0.0), timestamps=times)
    assert len(dst.dynamic_nodes) == 0
    assert [n.name for n in out.dynamic_nodes] == ["car"]
    placed = instantiate(out, times[1])
    background = len(dst.background)
    assert len(placed) == background + len(car.scene.dynamic_nodes[0].gaussians)
    original = instantiate(car.scene, car.rig.timestamps[0])
    car_part = original.means[len(car.scene.background):]
    assert torch.allclose(placed.means[background:], car_part + torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    with pytest.raises(DataError):
        insert_node(car.scene, 1, dst)


def test_priors_without_noise_are_ground_truth(plane_template, tiny_config):
    maps = render_ground_truth(plane_template, 0, tiny_config)
    spec = SynthSpec("lambertian-plane", image_size=16, num_frames=2)
    priors = make_priors(maps, spec, 0, tiny_config)
    assert np.array_equal(priors["albedo"], maps.rgb_albedo.numpy())
    assert np.array_equal(priors["rough"], maps.roughness.numpy())


def test_noisy_priors(plane_template, tiny_config):
    maps = render_ground_truth(plane_template, 0, tiny_config)
    spec = SynthSpec("lambertian-plane", image_size=16, num_frames=2, noise=1.0, seed=3)
    noisy = make_priors(maps, spec, 0, tiny_config)
    again = make_priors(maps, spec, 0, tiny_config)
    other = make_priors(maps, SynthSpec("lambertian-plane", noise=1.0, seed=4), 0, tiny_config)
    assert np.array_equal(noisy["albedo"], again["albedo"])
    assert not np.array_equal(noisy["albedo"], other["albedo"])
    assert not np.array_equal(noisy["albedo"], maps.rgb_albedo.numpy())
    assert noisy["albedo"].min() >= 0.0 and noisy["albedo"].max() <= 1.0
    covered = maps.alpha.numpy()[:, :, 0] > 0
    assert np.allclose(np.linalg.norm(noisy["normal"][covered], axis=-1), 1.0)


def test_direct_lighting_reference_is_the_large_sample_limit():
    rho = np.array([0.5, 0.4, 0.3])
    expected = rho / math.pi * (0.5 * 1.0 + 2.0)
    assert np.allclose(direct_lighting_reference(rho, (0, 0, 1), 1.0, (0, 0, 1), (2.0, 2.0, 2.0)), expected)
    assert np.allclose(direct_lighting_reference(rho, (0, 0, 1), 1.0, (0, 0, 1), (2.0, 2.0, 2.0), sun_visible=0.0), rho / math.pi * 0.5)

    normals = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    samples = 4096
    color = shade(
        normals, normals, torch.tensor([rho], dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
        torch.ones(1, dtype=torch.float64), hemisphere_directions(normals, samples),
        torch.ones((1, samples), dtype=torch.float64),
        Illumination.constant_sky(1.0, sun_direction=(0, 0, 1), sun_intensity=(2.0, 2.0, 2.0)),
    )
    assert np.allclose(color[0].numpy(), expected, rtol=1e-3)


def test_spotlight_cone():
    splats = GaussianSet.create(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), rgb_albedo=0.5, roughness=0.0)
    light = Spotlight.create((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), intensity=3.0, half_angle_deg=30.0)
    radiance = spotlight_radiance(splats, torch.tensor([0.0, 0.0, 2.0], dtype=torch.float64), [light])
    assert radiance[0].tolist() == pytest.approx([3.0 * 0.5 / math.pi] * 3)
    assert radiance[1].tolist() == [0.0, 0.0, 0.0]


def test_night_without_lights_is_black(plane_template, tiny_config):
    rig = plane_template.rig
    maps = night_sim(plane_template.scene, [], rig, rig.timestamps[0], tiny_config, sky_epsilon=0.0)
    assert torch.count_nonzero(maps.color) == 0
    assert maps.lidar_mask.sum() > 0


def test_spotlight_lights_the_plane(plane_template, tiny_config):
    rig = plane_template.rig
    light = Spotlight.create((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), intensity=2.0, half_angle_deg=40.0)
    maps = night_sim(plane_template.scene, [light], rig, rig.timestamps[0], tiny_config, sky_epsilon=0.0)
    centre = rig.camera.height // 2
    assert maps.color[centre, centre].min() > 0
    assert maps.color[0, 0].max() < maps.color[centre, centre].min()


def test_load_spotlights(tmp_path, tiny_config):
    path = tmp_path / "lights.json"
    path.write_text(json.dumps({"spotlights": [{"position": [0, 0, 2], "direction": [0, 0, -2], "intensity": [1, 2, 3]}]}))
    (light,) = load_spotlights(path, tiny_config)
    assert light.direction.tolist() == [0.0, 0.0, -1.0]
    assert light.intensity.tolist() == [1.0, 2.0, 3.0]
    assert light.half_angle_deg == tiny_config.night.cone_half_angle_deg


def test_malformed_spotlights(tmp_path):
    path = tmp_path / "lights.json"
    path.write_text(json.dumps({"spotlights": [{"position": [0, 0, 2]}]}))
    with pytest.raises(DataError, match="malformed spotlight"):
        load_spotlights(path)
    with pytest.raises(DataError):
        load_spotlights(tmp_path / "absent.json")
