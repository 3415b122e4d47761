"""Dataset ingestion: images, LiDAR returns, poses, priors and the initial scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import imageio.v2 as imageio
import numpy as np
import torch

from config import RunConfig
from core.losses import PriorBundle, load_prior_bundle
from core.maps_io import read_pfm
from core.scene_io import load_rig, read_boxes, read_pointcloud
from core.scenegraph import DTYPE, OrientedBox, SceneGraph, SensorRig, init_from_pointcloud
from core.validator import DataError, validate_map_shape, validate_rig
from paths import DatasetLayout

logger = logging.getLogger(__name__)


@dataclass
class FrameData:
    """Targets for one training frame."""

    index: int
    timestamp: float
    color: torch.Tensor
    intensity: torch.Tensor
    lidar_mask: torch.Tensor
    priors: PriorBundle = field(default_factory=PriorBundle)


@dataclass
class Dataset:
    layout: DatasetLayout
    rig: SensorRig
    frames: list[FrameData]
    boxes: list[OrientedBox] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def read_frame_image(layout: DatasetLayout, idx: int, height: int, width: int) -> np.ndarray:
    """Linear RGB frame from frame_{idx}.pfm, or an 8-bit gamma PNG as fallback."""
    pfm = layout.frame_image(idx, "pfm")
    png = layout.frame_image(idx, "png")
    if pfm.exists():
        image = read_pfm(pfm)
        path = pfm
    elif png.exists():
        image = (np.asarray(imageio.imread(png), dtype=np.float64)[:, :, :3] / 255.0) ** 2.2
        path = png
    else:
        raise DataError(f"missing_file: frame image not found: {pfm}")
    validate_map_shape("frame image", image, height, width, 3, path)
    return image


def project_lidar(points: np.ndarray, rig: SensorRig, frame: int, threshold: float = 0.0, near: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Sparse (H, W, 1) intensity map and mask from world-frame returns.

    When several returns land on one pixel the one closest to the camera wins.
    """
    cam = rig.camera
    pose = rig.camera_poses[frame]
    cloud = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    local = (cloud[:, :3] - pose.translation) @ pose.rotation
    z = local[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    col = np.rint(cam.fx * local[:, 0] / zs + cam.cx).astype(np.int64)
    row = np.rint(cam.fy * local[:, 1] / zs + cam.cy).astype(np.int64)
    ok = front & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    ok &= cloud[:, 3] > threshold

    intensity = np.zeros((cam.height, cam.width, 1))
    mask = np.zeros((cam.height, cam.width, 1))
    if np.any(ok):
        row, col, z, value = row[ok], col[ok], z[ok], cloud[ok, 3]
        pixel = row * cam.width + col
        order = np.lexsort((z, pixel))
        first = order[np.unique(pixel[order], return_index=True)[1]]
        intensity[row[first], col[first], 0] = value[first]
        mask[row[first], col[first], 0] = 1.0
    return intensity, mask


def load_dataset(root: str | Path, config: RunConfig) -> Dataset:
    """Load every frame's targets and priors from a dataset directory.

    Raises:
        DataError: Naming the first missing or malformed file.
    """
    layout = DatasetLayout(Path(root))
    rig = load_rig(layout.rig_path, layout.poses_path)
    validate_rig(rig)
    cam = rig.camera
    frames: list[FrameData] = []
    for idx, stamp in enumerate(rig.timestamps):
        color = read_frame_image(layout, idx, cam.height, cam.width)
        points = read_pointcloud(layout.lidar_points(idx))
        intensity, mask = project_lidar(points, rig, idx, config.render.lidar_mask_threshold, config.render.near_plane)
        priors = load_prior_bundle(layout, idx, cam.height, cam.width)
        frames.append(FrameData(
            index=idx,
            timestamp=float(stamp),
            color=torch.as_tensor(color, dtype=DTYPE),
            intensity=torch.as_tensor(intensity, dtype=DTYPE),
            lidar_mask=torch.as_tensor(mask, dtype=DTYPE),
            priors=priors,
        ))
    boxes = read_boxes(layout.boxes_path) if layout.boxes_path.exists() else []
    logger.info("loaded dataset root=%s frames=%d boxes=%d", layout.root, len(frames), len(boxes))
    return Dataset(layout, rig, frames, boxes)


def initial_scene(dataset: Dataset, config: RunConfig) -> SceneGraph:
    """Seed the scene graph from pointcloud.bin (or the union of per-frame returns)."""
    layout = dataset.layout
    if layout.pointcloud_path.exists():
        points = read_pointcloud(layout.pointcloud_path)
    else:
        points = np.concatenate([read_pointcloud(layout.lidar_points(f.index)) for f in dataset.frames])
    sc = config.scene
    return init_from_pointcloud(
        points,
        budget=sc.point_budget,
        per_object_budget=sc.per_object_budget,
        boxes=dataset.boxes,
        seed=config.seed,
        sensor_origin=dataset.rig.lidar_poses[0].translation,
        knn_k=sc.knn_k,
        min_init_scale=sc.min_init_scale,
        scale_floor=sc.scale_floor,
        init_opacity=sc.init_opacity,
        init_roughness=sc.init_roughness,
        init_rgb_albedo=sc.init_rgb_albedo,
        init_color=sc.init_color,
        normal_init=sc.normal_init,
    )
