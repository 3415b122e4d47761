import json

import pytest

from config import RunConfig, apply_override, load_config, thread_cap
from core.validator import ConfigError
from paths import DESK_CONFIG_PATH


def test_defaults_match_long_schedule():
    config = load_config(None)
    assert config.schedule.learning_rate == 1e-5
    assert config.schedule.max_iterations == 30_000
    assert config.schedule.stage1_iterations == 15_000
    assert config.schedule.checkpoint_every == 1_000
    assert config.scene.point_budget == 800_000
    assert config.densify.enabled is False


def test_desk_scale_config_splits_evenly():
    config = load_config(DESK_CONFIG_PATH)
    assert config.schedule.stage1_iterations == 1500
    assert config.schedule.max_iterations == 3000
    assert config.schedule.learning_rate == pytest.approx(2e-2)


def test_file_then_override_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"schedule": {"learning_rate": 0.5, "max_iterations": 10, "stage1_iterations": 5}}))
    config = load_config(path, {"schedule.learning_rate": "0.25"})
    assert config.schedule.learning_rate == 0.25
    assert config.schedule.max_iterations == 10


def test_override_coerces_to_field_type():
    config = RunConfig()
    apply_override(config, "schedule.max-iterations", "3000")
    apply_override(config, "densify.enabled", "true")
    apply_override(config, "shading.f0", "0.05")
    assert config.schedule.max_iterations == 3000 and isinstance(config.schedule.max_iterations, int)
    assert config.densify.enabled is True
    assert config.shading.f0 == 0.05


@pytest.mark.parametrize("key, value", [
    ("schedule.nope", "1"),
    ("nosection.field", "1"),
    ("schedule", "1"),
    ("schedule.max_iterations", "lots"),
])
def test_bad_overrides_raise(key, value):
    with pytest.raises(ConfigError):
        apply_override(RunConfig(), key, value)


def test_unknown_file_key_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"render": {"sampels_train": 3}}))
    with pytest.raises(ConfigError, match="sampels_train"):
        load_config(path)


def test_missing_config_file_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_range_checks():
    with pytest.raises(ConfigError):
        load_config(None, {"shading.lidar_model": "phong"})
    with pytest.raises(ConfigError):
        load_config(None, {"schedule.stage1_iterations": "40000"})
    with pytest.raises(ConfigError):
        load_config(None, {"loss.sigma": "0"})


def test_config_hash_tracks_content():
    a = load_config(None)
    b = load_config(None)
    c = load_config(None, {"seed": "7"})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert a.config_hash().startswith("sha256:")


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("INVRL_THREADS", raising=False)
    assert thread_cap() is None
    monkeypatch.setenv("INVRL_THREADS", "3")
    assert thread_cap() == 3
    monkeypatch.setenv("INVRL_THREADS", "0")
    with pytest.raises(ConfigError):
        thread_cap()
