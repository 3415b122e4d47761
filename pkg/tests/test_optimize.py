import json
import logging

import numpy as np
import pytest
import torch

from core.ingest import initial_scene, load_dataset
from core.ledger import read_jsonl
from core.optimize import (
    ALL_FIELDS,
    GEOMETRY_FIELDS,
    STAGE1_TRAINABLE,
    STAGE2_TRAINABLE,
    StagePlan,
    decode,
    densify,
    enter_stage2,
    gradients,
    init_state,
    latest_checkpoint,
    loss_at,
    restore_state,
    run_schedule,
    step,
)
from core.scenegraph import Illumination
from core.validator import NumericError
from paths import RunLayout


@pytest.fixture
def dataset(plane_dataset, tiny_config):
    return load_dataset(plane_dataset, tiny_config)


@pytest.fixture
def scene(dataset, tiny_config):
    return initial_scene(dataset, tiny_config)


@pytest.mark.parametrize("name", ["scales", "opacities", "rgb_albedo", "sun_intensity"])
def test_latents_decode_back(name):
    from core.optimize import encode

    value = torch.tensor([0.05, 0.3, 0.9], dtype=torch.float64)
    assert torch.allclose(decode(name, encode(name, value)), value, atol=1e-12)


def test_bounded_fields_stay_in_range():
    latent = torch.tensor([-1e3, 0.0, 1e3], dtype=torch.float64)
    out = decode("roughness", latent)
    assert torch.all((out >= 0) & (out <= 1))
    assert torch.all(decode("scales", latent, scale_floor=1e-6) >= 1e-6)


def test_stage_plans(tiny_config):
    first = StagePlan.for_stage(1, tiny_config)
    second = StagePlan.for_stage(2, tiny_config)
    assert first.color_path == "radiance" and second.color_path == "pbr"
    assert set(GEOMETRY_FIELDS) <= set(second.frozen)
    assert "roughness" in second.frozen
    assert {"sky_sh", "sun_direction", "sun_intensity"} <= set(first.frozen)
    assert set(first.trainable) | set(first.frozen) == set(ALL_FIELDS)
    with pytest.raises(ValueError):
        StagePlan.for_stage(3, tiny_config)


def test_stage2_frozen_fields_get_zero_gradient(scene, dataset, tiny_config):
    state = init_state(scene, tiny_config, stage=2)
    grads = gradients(state, dataset, 0, tiny_config)
    for name in state.plan.frozen:
        assert torch.count_nonzero(grads[name]) == 0, name
    assert torch.count_nonzero(grads["rgb_albedo"]) > 0


def test_frozen_fields_are_bit_identical_after_steps(scene, dataset, tiny_config):
    state = init_state(scene, tiny_config)
    enter_stage2(state, dataset, tiny_config)
    before = {name: state.table.values[name].clone() for name in state.plan.frozen}
    albedo = state.table.values["rgb_albedo"].clone()
    for _ in range(2):
        step(state, dataset, tiny_config)
    for name, value in before.items():
        assert torch.equal(state.table.values[name], value), name
    assert not torch.equal(state.table.values["rgb_albedo"], albedo)


def _lit_state(scene, dataset, config, stage):
    """State with tie-free depths, varied LiDAR albedo and, in stage 2, a lit sky."""
    state = init_state(scene, config)
    values = state.table.values
    gen = torch.Generator().manual_seed(7)
    values["means"] = values["means"] + 1e-3 * torch.randn(values["means"].shape, generator=gen, dtype=torch.float64)
    values["lidar_albedo"] = 0.38 + 0.11 * torch.rand(values["lidar_albedo"].shape, generator=gen, dtype=torch.float64)
    if stage == 2:
        lit = Illumination.constant_sky(0.8, sun_direction=(0.3, 0.2, 0.9), sun_intensity=(1.5, 1.2, 1.0))
        values["sky_sh"] = lit.sky_sh.clone()
        values["sun_direction"] = lit.sun_direction.clone()
        values["sun_intensity"] = lit.sun_intensity.clone()
        enter_stage2(state, dataset, config)
    return state


def _central_difference(state, dataset, config, name, index, h=1e-6):
    values = {k: v.clone() for k, v in state.table.values.items()}
    shape = values[name].shape
    flat = values[name].reshape(-1).clone()
    flat[index] += h
    values[name] = flat.reshape(shape)
    plus = loss_at(state, dataset, 0, config, values)
    flat[index] -= 2 * h
    values[name] = flat.reshape(shape)
    minus = loss_at(state, dataset, 0, config, values)
    return (plus - minus) / (2 * h)


@pytest.mark.parametrize(
    "stage,name",
    [(1, name) for name in STAGE1_TRAINABLE] + [(2, name) for name in STAGE2_TRAINABLE],
)
def test_gradient_matches_finite_difference(scene, dataset, tiny_config, stage, name):
    state = _lit_state(scene, dataset, tiny_config, stage)
    assert name in state.plan.trainable
    flat = gradients(state, dataset, 0, tiny_config)[name].reshape(-1)
    assert torch.count_nonzero(flat) > 0
    for index in torch.argsort(flat.abs(), descending=True)[:3].tolist():
        numeric = _central_difference(state, dataset, tiny_config, name, index)
        assert numeric == pytest.approx(float(flat[index]), rel=1e-3, abs=1e-9), (name, index)


def test_empty_lidar_mask_warns_once_per_frame(scene, dataset, tiny_config, caplog):
    dataset.frames[0].lidar_mask = torch.zeros_like(dataset.frames[0].lidar_mask)
    state = init_state(scene, tiny_config)
    with caplog.at_level(logging.WARNING, logger="core.optimize"):
        for _ in range(4):
            step(state, dataset, tiny_config)
    warnings = [r for r in caplog.records if "empty LiDAR mask" in r.getMessage()]
    assert len(warnings) == 1
    assert "frame 0" in warnings[0].getMessage()
    assert state.empty_lidar_frames == {0}


def test_schedule_writes_log_and_checkpoints(scene, dataset, tiny_config, tmp_path):
    layout = RunLayout(tmp_path / "run")
    final, log = run_schedule(scene, dataset, tiny_config, layout, progress=False)
    assert [r["iteration"] for r in log] == [0, 1, 2, 3]
    assert [r["stage"] for r in log] == [1, 1, 2, 2]
    assert [r["frame"] for r in log] == [0, 1, 0, 1]
    assert log[0]["w_rgb_to_lidar"] == 0.0
    assert all(np.isfinite(r["total"]) for r in log)
    assert [r["iteration"] for r in read_jsonl(layout.loss_log)] == [0, 1, 2, 3]
    assert layout.checkpoint(2).exists() and layout.checkpoint(4).exists()
    assert layout.final_scene.exists()
    assert latest_checkpoint(layout) == layout.checkpoint(4)
    assert final.primitive_count() == scene.primitive_count()


def test_resume_matches_uninterrupted_run(scene, dataset, tiny_config, tmp_path):
    full_layout = RunLayout(tmp_path / "full")
    full, full_log = run_schedule(scene, dataset, tiny_config, full_layout, progress=False)

    resumed_layout = RunLayout(tmp_path / "resumed")
    resumed_layout.ensure_dirs()
    for suffix in ("ckpt_000002.pt", "scene_000002.txt"):
        (resumed_layout.checkpoints_dir / suffix).write_bytes((full_layout.checkpoints_dir / suffix).read_bytes())
    resumed, tail = run_schedule(scene, dataset, tiny_config, resumed_layout, resume=resumed_layout.checkpoint(2), progress=False)

    assert [r["iteration"] for r in tail] == [2, 3]
    assert [r["total"] for r in tail] == [r["total"] for r in full_log[2:]]
    for name in ("means", "rgb_albedo", "lidar_albedo", "sun_visibility"):
        assert torch.equal(getattr(resumed.background, name), getattr(full.background, name)), name
    assert torch.equal(resumed.illumination.sky_sh, full.illumination.sky_sh)


def test_restore_state_round_trip(scene, dataset, tiny_config, tmp_path):
    layout = RunLayout(tmp_path / "run")
    run_schedule(scene, dataset, tiny_config, layout, progress=False)
    state = restore_state(layout.checkpoint(4), tiny_config)
    assert state.iteration == 4
    assert state.stage == 2
    assert set(state.table.latents) == set(StagePlan.for_stage(2, tiny_config).trainable)


def test_nan_target_raises_and_dumps(scene, dataset, tiny_config, tmp_path):
    dataset.frames[0].color[0, 0, 0] = float("nan")
    dump = tmp_path / "failure_dump.json"
    state = init_state(scene, tiny_config)
    with pytest.raises(NumericError, match="non-finite loss"):
        step(state, dataset, tiny_config, dump)
    payload = json.loads(dump.read_text())
    assert payload["frame"] == 0
    assert payload["term"] == "rgb"
    assert payload["iteration"] == 0


def test_densify_clone_split_prune(plane_template, tiny_config):
    state = init_state(plane_template.scene, tiny_config)
    values = state.table.values
    values["scales"][0] = 1e-4
    values["scales"][1] = 1.0
    values["opacities"][2:5] = 1e-3
    state.grad_accum[:2] = 1.0
    state.grad_count[:2] = 1.0

    cloned, split, pruned = densify(state, tiny_config)
    assert (cloned, split, pruned) == (1, 1, 3)
    assert len(state.table) == n + 1 + 2 - 1 - 3
    assert torch.all(state.table.values["opacities"] >= tiny_config.densify.prune_opacity)
    assert np.all(state.table.owners == -1)
    assert set(state.table.latents) == set(state.plan.trainable)
    assert torch.count_nonzero(state.grad_accum) == 0
