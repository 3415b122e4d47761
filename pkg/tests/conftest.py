"""Shared fixtures: a small config, tiny templates and a generated dataset."""

from pathlib import Path

import pytest

from config import RunConfig, configure_torch, load_config
from core.synth import SynthSpec, build_template, generate

TINY_OVERRIDES = {
    "render.samples_train": "4",
    "render.samples_final": "8",
    "render.samples_reference": "8",
    "synth.image_size": "16",
    "synth.num_frames": "2",
    "schedule.learning_rate": "0.01",
    "schedule.max_iterations": "4",
    "schedule.stage1_iterations": "2",
    "schedule.checkpoint_every": "2",
    "schedule.log_every": "0",
}


@pytest.fixture(scope="session", autouse=True)
def _torch_setup():
    configure_torch()


@pytest.fixture
def tiny_config(monkeypatch) -> RunConfig:
    monkeypatch.delenv("INVRL_THREADS", raising=False)
    return load_config(None, TINY_OVERRIDES)


@pytest.fixture
def plane_template(tiny_config):
    return build_template(SynthSpec("lambertian-plane", image_size=16, num_frames=2), tiny_config)


@pytest.fixture
def pole_template(tiny_config):
    return build_template(SynthSpec("shadow-pole", image_size=16, num_frames=2), tiny_config)


@pytest.fixture(scope="session")
def plane_dataset(tmp_path_factory) -> Path:
    config = load_config(None, TINY_OVERRIDES)
    out = tmp_path_factory.mktemp("plane")
    generate(SynthSpec("lambertian-plane", image_size=16, num_frames=2), out, config)
    return out
