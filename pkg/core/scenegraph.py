"""
Relightable Gaussian scene graph: primitives, dynamic nodes, illumination,
sensor rig, pose composition and point-cloud initialisation.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from core.validator import DataError, OutOfRangeError, validate_rotation, validate_timestamps

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SH_COEFFS = 16
SH_Y00 = 0.28209479177387814

# (name, width) for every per-primitive field; width 0 marks a scalar field.
GAUSSIAN_FIELDS: tuple[tuple[str, int], ...] = (
    ("means", 3),
    ("scales", 3),
    ("rotations", 4),
    ("opacities", 0),
    ("colors", 3),
    ("normals", 3),
    ("rgb_albedo", 3),
    ("roughness", 0),
    ("lidar_albedo", 0),
    ("sun_visibility", 0),
)
FIELD_NAMES = tuple(name for name, _ in GAUSSIAN_FIELDS)


@dataclass
class GaussianPrimitive:
    """One scene atom: geometry, opacity and material for both spectra."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    color: np.ndarray
    normal: np.ndarray
    rgb_albedo: np.ndarray
    roughness: float
    lidar_albedo: float
    sun_visibility: float


@dataclass
class GaussianSet:
    """Structure-of-arrays view over many primitives (float64 tensors)."""

    means: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor
    normals: torch.Tensor
    rgb_albedo: torch.Tensor
    roughness: torch.Tensor
    lidar_albedo: torch.Tensor
    sun_visibility: torch.Tensor

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(**{
            name: torch.zeros((0, width) if width else (0,), dtype=DTYPE)
            for name, width in GAUSSIAN_FIELDS
        })

    @classmethod
    def create(
        cls,
        means: np.ndarray | torch.Tensor,
        normals: np.ndarray | torch.Tensor | None = None,
        scales: float | np.ndarray | torch.Tensor = 0.05,
        rotations: np.ndarray | torch.Tensor | None = None,
        opacities: float | np.ndarray | torch.Tensor = 0.5,
        colors: float | np.ndarray | torch.Tensor = 0.5,
        rgb_albedo: float | np.ndarray | torch.Tensor = 0.5,
        roughness: float | np.ndarray | torch.Tensor = 0.5,
        lidar_albedo: float | np.ndarray | torch.Tensor = 0.5,
        sun_visibility: float | np.ndarray | torch.Tensor = 1.0,
    ) -> "GaussianSet":
        """Build a set from means, broadcasting scalar or per-row defaults."""
        mu = torch.as_tensor(np.asarray(means, dtype=np.float64) if not torch.is_tensor(means) else means, dtype=DTYPE)
        mu = mu.reshape(-1, 3)
        n = mu.shape[0]
        if normals is None:
            nrm = torch.zeros((n, 3), dtype=DTYPE)
            nrm[:, 2] = 1.0
        else:
            nrm = _broadcast(normals, n, 3)
            nrm = nrm / nrm.norm(dim=-1, keepdim=True)
        if rotations is None:
            rot = torch.zeros((n, 4), dtype=DTYPE)
            rot[:, 0] = 1.0
        else:
            rot = _broadcast(rotations, n, 4)
        return cls(
            means=mu.clone(),
            scales=_broadcast(scales, n, 3),
            rotations=rot,
            opacities=_broadcast(opacities, n, 0),
            colors=_broadcast(colors, n, 3),
            normals=nrm,
            rgb_albedo=_broadcast(rgb_albedo, n, 3),
            roughness=_broadcast(roughness, n, 0),
            lidar_albedo=_broadcast(lidar_albedo, n, 0),
            sun_visibility=_broadcast(sun_visibility, n, 0),
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if not primitives:
            return cls.empty()
        return cls(
            means=_stack([p.mean for p in primitives]),
            scales=_stack([p.scale for p in primitives]),
            rotations=_stack([p.rotation for p in primitives]),
            opacities=_stack([p.opacity for p in primitives]),
            colors=_stack([p.color for p in primitives]),
            normals=_stack([p.normal for p in primitives]),
            rgb_albedo=_stack([p.rgb_albedo for p in primitives]),
            roughness=_stack([p.roughness for p in primitives]),
            lidar_albedo=_stack([p.lidar_albedo for p in primitives]),
            sun_visibility=_stack([p.sun_visibility for p in primitives]),
        )

    @classmethod
    def concat(cls, sets: Sequence["GaussianSet"]) -> "GaussianSet":
        if not sets:
            return cls.empty()
        return cls(**{name: torch.cat([getattr(s, name) for s in sets], dim=0) for name in FIELD_NAMES})

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def __getitem__(self, index: int) -> GaussianPrimitive:
        def vec(name: str) -> np.ndarray:
            return getattr(self, name)[index].detach().cpu().numpy().copy()

        def scalar(name: str) -> float:
            return float(getattr(self, name)[index])

        return GaussianPrimitive(
            mean=vec("means"),
            scale=vec("scales"),
            rotation=vec("rotations"),
            opacity=scalar("opacities"),
            color=vec("colors"),
            normal=vec("normals"),
            rgb_albedo=vec("rgb_albedo"),
            roughness=scalar("roughness"),
            lidar_albedo=scalar("lidar_albedo"),
            sun_visibility=scalar("sun_visibility"),
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for index in range(len(self)):
            yield self[index]

    def primitives(self) -> list[GaussianPrimitive]:
        return list(self)

    def select(self, index: torch.Tensor | np.ndarray | slice) -> "GaussianSet":
        if isinstance(index, np.ndarray):
            index = torch.as_tensor(index)
        return GaussianSet(**{name: getattr(self, name)[index] for name in FIELD_NAMES})

    def clone(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).clone() for name in FIELD_NAMES})

    def detach(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).detach().clone() for name in FIELD_NAMES})

    def with_fields(self, **changes: torch.Tensor) -> "GaussianSet":
        return replace(self, **changes)

    def rotation_matrices(self) -> torch.Tensor:
        return quat_to_matrix(self.rotations)

    def covariances(self) -> torch.Tensor:
        """Sigma = R diag(scale^2) R^T, SPD by construction."""
        rot = self.rotation_matrices()
        return rot @ torch.diag_embed(self.scales**2) @ rot.transpose(-1, -2)


@dataclass
class Pose:
    """Rigid transform mapping local coordinates to world: x_w = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float]) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_quaternion(cls, quat_wxyz: Sequence[float], translation: Sequence[float]) -> "Pose":
        w, x, y, z = quat_wxyz
        rot = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(rot, np.asarray(translation, dtype=np.float64))

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> "Pose":
        """Camera-to-world pose with +z forward, +x right, +y down."""
        eye_v = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye_v
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye_v)

    def quaternion(self) -> np.ndarray:
        """(w, x, y, z), with w >= 0."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        quat = np.array([w, x, y, z])
        return -quat if quat[0] < 0 else quat

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other (apply other first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


@dataclass
class Trajectory:
    """Timed keyframes of a rigid node."""

    timestamps: np.ndarray
    poses: list[Pose]

    @classmethod
    def static(cls, pose: Pose, timestamps: Sequence[float]) -> "Trajectory":
        return cls(np.asarray(timestamps, dtype=np.float64), [copy.deepcopy(pose) for _ in timestamps])

    def bounds(self) -> tuple[float, float]:
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def validate(self, label: str) -> None:
        validate_timestamps(self.timestamps, label)
        if len(self.poses) != len(self.timestamps):
            raise DataError(f"{label}: {len(self.poses)} poses for {len(self.timestamps)} timestamps")
        for pose in self.poses:
            validate_rotation(pose.rotation, label)

    def at(self, t: float, label: str = "node") -> Pose:
        """Pose at t: lerp translation, slerp rotation between keyframes."""
        times = self.timestamps
        lo, hi = self.bounds()
        if t < lo or t > hi:
            raise OutOfRangeError(f"timestamp {t} outside trajectory of '{label}' [{lo}, {hi}]")
        exact = np.nonzero(times == t)[0]
        if exact.size:
            return copy.deepcopy(self.poses[int(exact[0])])
        upper = int(np.searchsorted(times, t))
        lower = upper - 1
        t0, t1 = float(times[lower]), float(times[upper])
        w = (t - t0) / (t1 - t0)
        p0, p1 = self.poses[lower], self.poses[upper]
        slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([p0.rotation, p1.rotation])))
        rot = slerp([w]).as_matrix()[0]
        trans = (1.0 - w) * p0.translation + w * p1.translation
        return Pose(rot, trans)


@dataclass
class DynamicNode:
    """Rigid object: node-local primitives plus a timed trajectory."""

    name: str
    gaussians: GaussianSet
    trajectory: Trajectory


@dataclass
class Illumination:
    """Third-order SH sky (16x3) plus a directional sun."""

    sky_sh: torch.Tensor
    sun_direction: torch.Tensor
    sun_intensity: torch.Tensor

    @classmethod
    def create(
        cls,
        sky_sh: np.ndarray | torch.Tensor | None = None,
        sun_direction: Sequence[float] = (0.0, 0.0, 1.0),
        sun_intensity: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "Illumination":
        sky = torch.zeros((SH_COEFFS, 3), dtype=DTYPE) if sky_sh is None else torch.as_tensor(np.asarray(sky_sh, dtype=np.float64) if not torch.is_tensor(sky_sh) else sky_sh, dtype=DTYPE).clone()
        direction = torch.as_tensor(np.asarray(sun_direction, dtype=np.float64), dtype=DTYPE)
        direction = direction / direction.norm()
        return cls(sky, direction, torch.as_tensor(np.asarray(sun_intensity, dtype=np.float64), dtype=DTYPE))

    @classmethod
    def constant_sky(
        cls,
        radiance: Sequence[float] | float,
        sun_direction: Sequence[float] = (0.0, 0.0, 1.0),
        sun_intensity: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "Illumination":
        """Sky with only the DC coefficient set so L(w) == radiance everywhere."""
        sky = np.zeros((SH_COEFFS, 3))
        sky[0] = np.broadcast_to(np.asarray(radiance, dtype=np.float64), (3,)) / SH_Y00
        return cls.create(sky, sun_direction, sun_intensity)

    def clone(self) -> "Illumination":
        return Illumination(self.sky_sh.detach().clone(), self.sun_direction.detach().clone(), self.sun_intensity.detach().clone())


@dataclass
class SceneGraph:
    """Static background, rigid dynamic nodes and the illumination node."""

    background: GaussianSet
    dynamic_nodes: list[DynamicNode] = field(default_factory=list)
    illumination: Illumination = field(default_factory=Illumination.create)
    point_budget: int = 800_000

    def primitive_count(self) -> int:
        return len(self.background) + sum(len(node.gaussians) for node in self.dynamic_nodes)

    def clone(self) -> "SceneGraph":
        return SceneGraph(
            background=self.background.detach(),
            dynamic_nodes=[
                DynamicNode(node.name, node.gaussians.detach(), copy.deepcopy(node.trajectory))
                for node in self.dynamic_nodes
            ],
            illumination=self.illumination.clone(),
            point_budget=self.point_budget,
        )

    def time_range(self) -> tuple[float, float] | None:
        """Intersection of all node trajectory ranges (None for static scenes)."""
        if not self.dynamic_nodes:
            return None
        lows, highs = zip(*(node.trajectory.bounds() for node in self.dynamic_nodes))
        return max(lows), min(highs)


@dataclass
class CameraIntrinsics:
    """Pinhole camera; pixel centres sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
        return cls(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class LidarSpec:
    """Beam table in the sensor frame (+x forward, +y left, +z up)."""

    elevations_deg: list[float]
    azimuth_step_deg: float
    azimuth_min_deg: float = -180.0
    azimuth_max_deg: float = 180.0
    elevation_min_deg: float = -90.0
    elevation_max_deg: float = 90.0
    emitted_power: float = 1.0

    def beam_directions(self) -> np.ndarray:
        elev = np.asarray(
            [e for e in self.elevations_deg if self.elevation_min_deg <= e <= self.elevation_max_deg],
            dtype=np.float64,
        )
        count = int(math.floor((self.azimuth_max_deg - self.azimuth_min_deg) / self.azimuth_step_deg + 1e-9))
        azim = self.azimuth_min_deg + self.azimuth_step_deg * np.arange(max(count, 1))
        e, a = np.meshgrid(np.radians(elev), np.radians(azim), indexing="ij")
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return dirs.reshape(-1, 3)


@dataclass
class SensorRig:
    """Camera and LiDAR with per-frame poses sharing one timestamp index."""

    camera: CameraIntrinsics
    lidar: LidarSpec
    timestamps: list[float]
    camera_poses: list[Pose]
    lidar_poses: list[Pose]

    def __len__(self) -> int:
        return len(self.timestamps)

    def frame_at(self, t: float) -> int:
        for idx, stamp in enumerate(self.timestamps):
            if stamp == t:
                return idx
        raise DataError(f"no rig frame at timestamp {t}")


@dataclass
class OrientedBox:
    """Object box (centre, size, yaw) with its per-timestamp poses."""

    name: str
    center: np.ndarray
    size: np.ndarray
    yaw: float
    keyframes: list[tuple[float, Pose]] = field(default_factory=list)

    def reference_pose(self) -> Pose:
        return Pose.from_yaw(self.yaw, self.center)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.reference_pose().inverse().apply(points)
        return np.all(np.abs(local) <= np.asarray(self.size) / 2.0, axis=1)

    def trajectory(self) -> Trajectory:
        if not self.keyframes:
            raise DataError(f"box '{self.name}' has no poses")
        times = np.asarray([t for t, _ in self.keyframes], dtype=np.float64)
        return Trajectory(times, [pose for _, pose in self.keyframes])


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------


def quat_to_matrix(quat: torch.Tensor) -> torch.Tensor:
    """(..., 4) wxyz quaternions -> (..., 3, 3) rotation matrices."""
    q = quat / quat.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a ⊗ b for wxyz quaternions."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quaternion_from_normal(normals: np.ndarray) -> np.ndarray:
    """Shortest-arc rotations taking +z onto each normal, (N, 4) wxyz."""
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(np.broadcast_to(z, nrm.shape), nrm)
    w = 1.0 + nrm[:, 2]
    quat = np.concatenate([w[:, None], axis], axis=1)
    flipped = w < 1e-12
    quat[flipped] = np.array([0.0, 1.0, 0.0, 0.0])
    return quat / np.linalg.norm(quat, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# pose composition
# ---------------------------------------------------------------------------


def transform_gaussians(gaussians: GaussianSet, pose: Pose) -> GaussianSet:
    """Apply a rigid pose to means, rotations and normals."""
    if pose.is_identity():
        return gaussians.with_fields()
    rot = torch.as_tensor(pose.rotation, dtype=DTYPE)
    trans = torch.as_tensor(pose.translation, dtype=DTYPE)
    quat = torch.as_tensor(pose.quaternion(), dtype=DTYPE)
    return gaussians.with_fields(
        means=gaussians.means @ rot.T + trans,
        rotations=quat_multiply(quat.expand_as(gaussians.rotations), gaussians.rotations),
        normals=gaussians.normals @ rot.T,
    )


def instantiate(scene: SceneGraph, t: float) -> GaussianSet:
    """Flatten the scene into world-frame primitives at timestamp t.

    Background primitives are passed through unchanged; each dynamic node is
    transformed by its pose at t. Primitive order is background first, then
    nodes in declaration order.
    """
    parts = [scene.background]
    for node in scene.dynamic_nodes:
        pose = node.trajectory.at(t, node.name)
        parts.append(transform_gaussians(node.gaussians, pose))
    return GaussianSet.concat(parts)


def owner_index(scene: SceneGraph) -> np.ndarray:
    """Per-primitive owner in instantiate order: -1 background, k for node k."""
    owners = [np.full(len(scene.background), -1, dtype=np.int64)]
    owners += [np.full(len(node.gaussians), k, dtype=np.int64) for k, node in enumerate(scene.dynamic_nodes)]
    return np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)


def scatter_to_scene(scene: SceneGraph, name: str, values: torch.Tensor) -> None:
    """Write a per-primitive field given in instantiate order back into the scene."""
    start = len(scene.background)
    setattr(scene.background, name, values[:start].clone())
    for node in scene.dynamic_nodes:
        stop = start + len(node.gaussians)
        setattr(node.gaussians, name, values[start:stop].clone())
        start = stop


# ---------------------------------------------------------------------------
# point-cloud initialisation
# ---------------------------------------------------------------------------


def init_from_pointcloud(
    points: np.ndarray,
    budget: int = 800_000,
    per_object_budget: int = 5_000,
    boxes: Sequence[OrientedBox] = (),
    seed: int = 0,
    sensor_origin: Sequence[float] = (0.0, 0.0, 0.0),
    knn_k: int = 3,
    min_init_scale: float = 1e-3,
    scale_floor: float = 1e-6,
    init_opacity: float = 0.5,
    init_roughness: float = 0.5,
    init_rgb_albedo: float = 0.5,
    init_color: float = 0.5,
    normal_init: str = "sensor",
    illumination: Illumination | None = None,
) -> SceneGraph:
    """Seed a scene graph from (x, y, z, intensity) LiDAR points.

    Points above budget are uniformly subsampled with a seeded generator.
    Points inside a box become that box's dynamic node (capped at
    per_object_budget), the rest form the background.
    """
    cloud = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if cloud.shape[0] == 0:
        raise DataError("point cloud is empty")
    if budget < 1:
        raise DataError("point budget must be >= 1")

    rng = np.random.default_rng(seed)
    if cloud.shape[0] > budget:
        keep = np.sort(rng.choice(cloud.shape[0], size=budget, replace=False))
        logger.info("subsampled point cloud from %d to %d points", cloud.shape[0], budget)
        cloud = cloud[keep]

    origin = np.asarray(sensor_origin, dtype=np.float64)
    unassigned = np.ones(cloud.shape[0], dtype=bool)
    nodes: list[DynamicNode] = []
    for box in boxes:
        inside = np.nonzero(box.contains(cloud[:, :3]) & unassigned)[0]
        unassigned[inside] = False
        if inside.size > per_object_budget:
            inside = np.sort(rng.choice(inside, size=per_object_budget, replace=False))
        if inside.size == 0:
            logger.warning("box '%s' contains no points; node skipped", box.name)
            continue
        world = cloud[inside]
        reference = box.reference_pose()
        gaussians = _gaussians_from_points(
            world, origin, knn_k, min_init_scale, scale_floor, init_opacity,
            init_roughness, init_rgb_albedo, init_color, normal_init, label=box.name,
        )
        to_local = reference.inverse()
        local = transform_gaussians(gaussians, to_local)
        nodes.append(DynamicNode(box.name, local, box.trajectory()))

    background_pts = cloud[unassigned]
    if background_pts.shape[0]:
        background = _gaussians_from_points(
            background_pts, origin, knn_k, min_init_scale, scale_floor, init_opacity,
            init_roughness, init_rgb_albedo, init_color, normal_init, label="background",
        )
    else:
        background = GaussianSet.empty()

    return SceneGraph(
        background=background,
        dynamic_nodes=nodes,
        illumination=illumination if illumination is not None else Illumination.create(),
        point_budget=budget,
    )


def knn_mean_distance(xyz: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest other points (0 for a lone point)."""
    n = xyz.shape[0]
    if n < 2:
        return np.zeros(n)
    kk = min(k, n - 1)
    distances, _ = cKDTree(xyz).query(xyz, k=kk + 1)
    return np.asarray(distances, dtype=np.float64).reshape(n, kk + 1)[:, 1:].mean(axis=1)


def _pca_normals(xyz: np.ndarray, origin: np.ndarray, k: int = 8) -> np.ndarray | None:
    n = xyz.shape[0]
    if n < 3:
        return None
    kk = min(k, n - 1)
    _, idx = cKDTree(xyz).query(xyz, k=kk + 1)
    neighbors = xyz[np.asarray(idx).reshape(n, kk + 1)]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    facing = np.einsum("ni,ni->n", normals, origin - xyz)
    normals[facing < 0] *= -1.0
    return normals


def _gaussians_from_points(
    cloud: np.ndarray,
    origin: np.ndarray,
    knn_k: int,
    min_init_scale: float,
    scale_floor: float,
    init_opacity: float,
    init_roughness: float,
    init_rgb_albedo: float,
    init_color: float,
    normal_init: str,
    label: str,
) -> GaussianSet:
    xyz = cloud[:, :3]
    scale = knn_mean_distance(xyz, knn_k)
    degenerate = scale < min_init_scale
    if np.any(degenerate):
        logger.warning(
            "%s: %d points with degenerate neighbourhoods; scale floor %.3g m applied",
            label, int(degenerate.sum()), min_init_scale,
        )
        scale = np.where(degenerate, min_init_scale, scale)
    scale = np.maximum(scale, scale_floor)

    normals = None
    if normal_init == "pca":
        normals = _pca_normals(xyz, origin)
    if normals is None:
        normals = origin - xyz
        length = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(length > 1e-12, normals / np.maximum(length, 1e-12), np.array([0.0, 0.0, 1.0]))

    return GaussianSet.create(
        means=xyz,
        normals=normals,
        scales=np.repeat(scale[:, None], 3, axis=1),
        opacities=init_opacity,
        colors=init_color,
        rgb_albedo=init_rgb_albedo,
        roughness=init_roughness,
        lidar_albedo=np.clip(cloud[:, 3], 0.0, 1.0),
        sun_visibility=1.0,
    )


def _broadcast(value, n: int, width: int) -> torch.Tensor:
    tensor = value.detach().clone().to(DTYPE) if torch.is_tensor(value) else torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
    shape = (n, width) if width else (n,)
    if tensor.dim() == 1 and width and tensor.shape[0] == n and n != width:
        tensor = tensor[:, None]
    return tensor.expand(shape).clone()


def _stack(values) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)
