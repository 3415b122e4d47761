"""Centralized filesystem layout for datasets and run artifacts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


BASE_DIR = Path(__file__).resolve().parent

CONFIG_DIR = BASE_DIR / "config"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "default.json"
DESK_CONFIG_PATH = CONFIG_DIR / "desk_scale.json"


@dataclass(frozen=True)
class DatasetLayout:
    """Paths inside one dataset directory.

    frames/*.pfm|png, lidar/*.bin, poses.txt, rig.json, gt/*.pfm,
    priors/*.pfm, regions/*.png, spec.txt, pointcloud.bin, boxes.txt
    """

    root: Path

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def lidar_dir(self) -> Path:
        return self.root / "lidar"

    @property
    def gt_dir(self) -> Path:
        return self.root / "gt"

    @property
    def priors_dir(self) -> Path:
        return self.root / "priors"

    @property
    def regions_dir(self) -> Path:
        return self.root / "regions"

    @property
    def poses_path(self) -> Path:
        return self.root / "poses.txt"

    @property
    def rig_path(self) -> Path:
        return self.root / "rig.json"

    @property
    def spec_path(self) -> Path:
        return self.root / "spec.txt"

    @property
    def pointcloud_path(self) -> Path:
        return self.root / "pointcloud.bin"

    @property
    def boxes_path(self) -> Path:
        return self.root / "boxes.txt"

    @property
    def gt_scene_path(self) -> Path:
        return self.gt_dir / "scene.txt"

    def frame_image(self, idx: int, ext: str = "pfm") -> Path:
        return self.frames_dir / f"frame_{idx}.{ext}"

    def lidar_points(self, idx: int) -> Path:
        return self.lidar_dir / f"frame_{idx}.bin"

    def gt_map(self, idx: int, kind: str, ext: str = "pfm") -> Path:
        return self.gt_dir / f"frame_{idx}_{kind}.{ext}"

    def prior_map(self, idx: int, kind: str) -> Path:
        return self.priors_dir / f"frame_{idx}_{kind}.pfm"

    def light_mask(self, idx: int) -> Path:
        return self.priors_dir / f"frame_{idx}_light.png"

    def regions(self, idx: int) -> Path:
        return self.regions_dir / f"frame_{idx}_regions.png"

    def ensure_dirs(self) -> None:
        for directory in (self.frames_dir, self.lidar_dir, self.gt_dir, self.priors_dir, self.regions_dir):
            directory.mkdir(parents=True, exist_ok=True)


@dataclass(frozen=True)
class RunLayout:
    """Paths inside one command's output directory."""

    root: Path

    @property
    def config_echo(self) -> Path:
        return self.root / "config.json"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def loss_log(self) -> Path:
        return self.root / "losses.jsonl"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def final_scene(self) -> Path:
        return self.root / "scene_final.txt"

    @property
    def failure_dump(self) -> Path:
        return self.root / "failure_dump.json"

    @property
    def metrics_report(self) -> Path:
        return self.root / "metrics.json"

    def checkpoint(self, iteration: int) -> Path:
        return self.checkpoints_dir / f"ckpt_{iteration:06d}.pt"

    def checkpoint_scene(self, iteration: int) -> Path:
        return self.checkpoints_dir / f"scene_{iteration:06d}.txt"

    @property
    def maps_dir(self) -> Path:
        return self.root / "maps"

    def render_map(self, idx: int, kind: str) -> Path:
        return self.maps_dir / f"frame_{idx}_{kind}.pfm"

    def ensure_dirs(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.checkpoints_dir.mkdir(parents=True, exist_ok=True)
