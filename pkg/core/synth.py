"""
Synthetic datasets with analytic ground truth, relighting, object
insertion and night-time spotlight simulation.

Every template is a handful of flat Gaussian splats laid out on planes and
boxes; ground truth comes from the renderer itself at the reference sample
count, plus a closed-form direct-lighting reference for cross-checks.
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from config import RunConfig, thread_cap
from core.ledger import atomic_write_text, read_json
from core.losses import encode_normals
from core.maps_io import write_labels, write_map
from core.render import RenderedMaps, rasterize, render_lidar, render_view, shade_primitives
from core.scene_io import save_illumination, save_rig, save_scene, write_boxes, write_pointcloud
from core.scenegraph import (
    DTYPE,
    CameraIntrinsics,
    DynamicNode,
    GaussianSet,
    Illumination,
    LidarSpec,
    OrientedBox,
    Pose,
    SceneGraph,
    SensorRig,
    Trajectory,
    instantiate,
    quaternion_from_normal,
    scatter_to_scene,
)
from core.shading import cook_torrance_fr
from core.validator import ConfigError, DataError, require_file
from core.visibility import bake_sun_visibility, build_bvh
from paths import DatasetLayout

logger = logging.getLogger(__name__)

SPLAT_OPACITY = 0.99
SPLAT_FOOTPRINT = 0.6
SPLAT_THICKNESS = 1e-4
FRAME_DT = 0.1
DEFAULT_FOV_DEG = 60.0

# camera (x right, y down, z forward) -> LiDAR (x forward, y left, z up)
LIDAR_FROM_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class SurfaceMaterial:
    rgb_albedo: tuple[float, float, float]
    lidar_albedo: float
    roughness: float


@dataclass
class Surface:
    """A sampled patch of one material; node=None puts it in the background."""

    name: str
    means: np.ndarray
    normals: np.ndarray
    spacing: float
    material: SurfaceMaterial
    node: str | None = None


@dataclass
class TemplateScene:
    """Ground-truth scene plus everything needed to render a dataset from it."""

    scene: SceneGraph
    labels: np.ndarray
    surfaces: list[str]
    rig: SensorRig
    boxes: list[OrientedBox] = field(default_factory=list)
    alt_illumination: Illumination | None = None


@dataclass
class SynthSpec:
    """Everything that determines a synthetic dataset bit-exactly."""

    template: str
    image_size: int = 64
    num_frames: int = 4
    noise: float = 0.0
    seed: int = 0
    fov_deg: float = DEFAULT_FOV_DEG
    materials: dict[str, SurfaceMaterial] = field(default_factory=dict)
    illumination: Illumination | None = None

    @classmethod
    def from_config(cls, template: str, config: RunConfig) -> "SynthSpec":
        sc = config.synth
        return cls(template, sc.image_size, sc.num_frames, sc.noise, config.seed)

    def describe(self) -> str:
        lines = [
            f"template = {self.template}",
            f"image_size = {self.image_size}",
            f"num_frames = {self.num_frames}",
            f"noise = {self.noise!r}",
            f"seed = {self.seed}",
            f"fov_deg = {self.fov_deg!r}",
        ]
        for name in sorted(self.materials):
            m = self.materials[name]
            lines.append(f"material.{name} = rgb {m.rgb_albedo} lidar {m.lidar_albedo!r} roughness {m.roughness!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def plane_points(center, u_axis, v_axis, size_u: float, size_v: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid of points on a rectangle, with the normal u x v."""
    c = np.asarray(center, dtype=np.float64)
    u = np.asarray(u_axis, dtype=np.float64)
    v = np.asarray(v_axis, dtype=np.float64)
    nu = int(round(size_u / spacing)) + 1
    nv = int(round(size_v / spacing)) + 1
    a, b = np.meshgrid(np.linspace(-size_u / 2, size_u / 2, nu), np.linspace(-size_v / 2, size_v / 2, nv), indexing="ij")
    points = c + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    normal = np.cross(u, v)
    normal /= np.linalg.norm(normal)
    return points, np.broadcast_to(normal, points.shape).copy()


def box_points(center, size, spacing: float, skip_bottom: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Outward-facing grids on the faces of an axis-aligned box."""
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    eye = np.eye(3)
    points, normals = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            if skip_bottom and axis == 2 and sign < 0:
                continue
            u_ax, v_ax = [a for a in range(3) if a != axis]
            u, v = eye[u_ax], eye[v_ax]
            if sign * np.cross(u, v)[axis] < 0:
                u, v = v, u
                u_ax, v_ax = v_ax, u_ax
            pts, nrm = plane_points(c + sign * s[axis] / 2 * eye[axis], u, v, s[u_ax], s[v_ax], spacing)
            points.append(pts)
            normals.append(nrm)
    return np.concatenate(points), np.concatenate(normals)


def surface_splats(surface: Surface) -> GaussianSet:
    n = surface.means.shape[0]
    radius = surface.spacing * SPLAT_FOOTPRINT
    m = surface.material
    return GaussianSet.create(
        means=surface.means,
        normals=surface.normals,
        scales=np.tile([radius, radius, SPLAT_THICKNESS], (n, 1)),
        rotations=quaternion_from_normal(surface.normals),
        opacities=SPLAT_OPACITY,
        colors=np.asarray(m.rgb_albedo, dtype=np.float64),
        rgb_albedo=np.asarray(m.rgb_albedo, dtype=np.float64),
        roughness=m.roughness,
        lidar_albedo=m.lidar_albedo,
        sun_visibility=1.0,
    )


def assemble_scene(
    surfaces: Sequence[Surface],
    illumination: Illumination,
    trajectories: dict[str, Trajectory] | None = None,
) -> tuple[SceneGraph, np.ndarray, list[str]]:
    """Scene graph plus per-primitive surface labels (1-based) in storage order."""
    trajectories = trajectories or {}
    names = [s.name for s in surfaces]
    bg_sets, bg_labels = [], []
    node_sets: dict[str, list[GaussianSet]] = {}
    node_labels: dict[str, list[np.ndarray]] = {}
    for label, surface in enumerate(surfaces, start=1):
        splats = surface_splats(surface)
        tags = np.full(len(splats), label, dtype=np.int64)
        if surface.node is None:
            bg_sets.append(splats)
            bg_labels.append(tags)
        else:
            node_sets.setdefault(surface.node, []).append(splats)
            node_labels.setdefault(surface.node, []).append(tags)

    labels = list(bg_labels)
    nodes = []
    for name, sets in node_sets.items():
        if name not in trajectories:
            raise DataError(f"node '{name}' has no trajectory")
        nodes.append(DynamicNode(name, GaussianSet.concat(sets), trajectories[name]))
        labels.extend(node_labels[name])
    scene = SceneGraph(GaussianSet.concat(bg_sets), nodes, illumination)
    return scene, np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64), names


def bake_scene_sun_visibility(scene: SceneGraph, t: float, config: RunConfig) -> None:
    """Trace v_sun for every primitive at time t and write it into the scene."""
    gaussians = instantiate(scene, t)
    if len(gaussians) == 0:
        return
    vis = config.visibility
    bvh = build_bvh(gaussians, vis.sigma_extent, vis.leaf_size)
    baked = bake_sun_visibility(
        gaussians, bvh, scene.illumination.sun_direction,
        vis.opacity_threshold, vis.epsilon, vis.ray_chunk,
    )
    scatter_to_scene(scene, "sun_visibility", torch.as_tensor(baked, dtype=DTYPE))


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------


def lidar_pose_for(camera_pose: Pose) -> Pose:
    """Co-located LiDAR looking along the camera's optical axis."""
    return Pose(camera_pose.rotation @ LIDAR_FROM_CAMERA, camera_pose.translation.copy())


def frustum_lidar(image_size: int, fov_deg: float) -> LidarSpec:
    step = fov_deg / max(image_size // 2, 1)
    half = fov_deg / 2.0
    elevations = np.arange(-half, half + 1e-9, step)
    return LidarSpec(
        elevations_deg=[float(e) for e in elevations],
        azimuth_step_deg=step,
        azimuth_min_deg=-half,
        azimuth_max_deg=half + step,
    )


def orbit_rig(
    target,
    radius: float,
    height: float,
    azimuths_deg: Sequence[float],
    image_size: int,
    fov_deg: float,
) -> SensorRig:
    """Cameras on a circle around target, each with a co-located LiDAR."""
    tgt = np.asarray(target, dtype=np.float64)
    cameras = []
    for azimuth in azimuths_deg:
        a = math.radians(azimuth)
        eye = tgt + np.array([radius * math.cos(a), radius * math.sin(a), height])
        cameras.append(Pose.look_at(eye, tgt))
    camera = CameraIntrinsics.from_fov(image_size, image_size, fov_deg)
    return SensorRig(
        camera=camera,
        lidar=frustum_lidar(image_size, fov_deg),
        timestamps=[round(FRAME_DT * i, 10) for i in range(len(cameras))],
        camera_poses=cameras,
        lidar_poses=[lidar_pose_for(pose) for pose in cameras],
    )


def _arc(num_frames: int, center: float, spread: float) -> list[float]:
    if num_frames == 1:
        return [center]
    return list(np.linspace(center - spread / 2, center + spread / 2, num_frames))


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------


def _material(spec: SynthSpec, name: str, default: SurfaceMaterial) -> SurfaceMaterial:
    return spec.materials.get(name, default)


def _illumination(spec: SynthSpec, default: Illumination) -> Illumination:
    return spec.illumination.clone() if spec.illumination is not None else default


def _ground(spec: SynthSpec, default: SurfaceMaterial, size: float = 2.0, spacing: float = 0.1) -> Surface:
    pts, nrm = plane_points((0, 0, 0), (1, 0, 0), (0, 1, 0), size, size, spacing)
    return Surface("ground", pts, nrm, spacing, _material(spec, "ground", default))


def _box_surface(spec: SynthSpec, name: str, center, size, spacing: float, default: SurfaceMaterial, node: str | None = None) -> Surface:
    pts, nrm = box_points(center, size, spacing)
    return Surface(name, pts, nrm, spacing, _material(spec, name, default), node)


def template_lambertian_plane(spec: SynthSpec) -> TemplateScene:
    ground = _ground(spec, SurfaceMaterial((0.6, 0.45, 0.3), 0.7, 0.0))
    illum = _illumination(spec, Illumination.constant_sky(1.0))
    scene, labels, names = assemble_scene([ground], illum)
    rig = orbit_rig((0, 0, 0), 0.2, 1.5, _arc(spec.num_frames, 0.0, 90.0), spec.image_size, spec.fov_deg)
    return TemplateScene(scene, labels, names, rig)


def template_shadow_pole(spec: SynthSpec) -> TemplateScene:
    ground = _ground(spec, SurfaceMaterial((0.5, 0.5, 0.5), 0.6, 0.0), spacing=0.08)
    pole = _box_surface(spec, "pole", (0, 0, 0.4), (0.12, 0.12, 0.8), 0.04, SurfaceMaterial((0.7, 0.2, 0.2), 0.4, 0.0))
    illum = _illumination(spec, Illumination.constant_sky(0.2, sun_direction=(0.6, 0.0, 0.8), sun_intensity=(2.0, 2.0, 2.0)))
    scene, labels, names = assemble_scene([ground, pole], illum)
    rig = orbit_rig((0, 0, 0), 0.3, 1.6, _arc(spec.num_frames, 90.0, 60.0), spec.image_size, spec.fov_deg)
    return TemplateScene(scene, labels, names, rig)


def template_wall_vs_whiteboard(spec: SynthSpec) -> TemplateScene:
    spacing = 0.05
    wall_pts, wall_nrm = plane_points((2.0, -0.65, 1.0), (0, 1, 0), (0, 0, 1), 1.1, 1.6, spacing)
    board_pts, board_nrm = plane_points((2.0, 0.65, 1.0), (0, 1, 0), (0, 0, 1), 1.1, 1.6, spacing)
    # plane_points orients the normal as u x v = +x; both panels face the sensor at the origin
    wall = Surface("wall", wall_pts, -wall_nrm, spacing, _material(spec, "wall", SurfaceMaterial((0.8, 0.8, 0.75), 0.5, 0.0)))
    board = Surface("whiteboard", board_pts, -board_nrm, spacing, _material(spec, "whiteboard", SurfaceMaterial((0.9, 0.9, 0.9), 0.1, 0.1)))
    illum = _illumination(spec, Illumination.constant_sky(0.5))
    scene, labels, names = assemble_scene([wall, board], illum)
    cameras = [Pose.look_at((0.0, y, 1.0), (2.0, y, 1.0)) for y in _arc(spec.num_frames, 0.0, 0.6)]
    camera = CameraIntrinsics.from_fov(spec.image_size, spec.image_size, spec.fov_deg + 30.0)
    rig = SensorRig(
        camera,
        frustum_lidar(spec.image_size, spec.fov_deg + 30.0),
        [round(FRAME_DT * i, 10) for i in range(len(cameras))],
        cameras,
        [lidar_pose_for(pose) for pose in cameras],
    )
    return TemplateScene(scene, labels, names, rig)


RELIGHT_MORNING = Illumination.constant_sky(0.3, sun_direction=(0.7, 0.0, 0.7), sun_intensity=(1.6, 1.4, 1.2))
RELIGHT_NOON = Illumination.constant_sky(0.4, sun_direction=(0.1, 0.2, 0.97), sun_intensity=(2.0, 2.0, 2.0))


def template_relight_pair(spec: SynthSpec) -> TemplateScene:
    ground = _ground(spec, SurfaceMaterial((0.55, 0.5, 0.45), 0.6, 0.0), spacing=0.08)
    block = _box_surface(spec, "block", (0, 0, 0.2), (0.4, 0.4, 0.4), 0.05, SurfaceMaterial((0.3, 0.5, 0.7), 0.5, 0.0))
    illum = _illumination(spec, RELIGHT_MORNING.clone())
    scene, labels, names = assemble_scene([ground, block], illum)
    rig = orbit_rig((0, 0, 0), 1.0, 1.4, _arc(spec.num_frames, 200.0, 60.0), spec.image_size, spec.fov_deg)
    return TemplateScene(scene, labels, names, rig, alt_illumination=RELIGHT_NOON.clone())


CAR_CENTER = (0.0, 0.0, 0.31)
CAR_SIZE = (1.1, 0.6, 0.58)
CAR_YAW = 0.3


def template_car_mockup(spec: SynthSpec) -> TemplateScene:
    ground = _ground(spec, SurfaceMaterial((0.3, 0.3, 0.3), 0.3, 0.0), size=3.0)
    body = _box_surface(spec, "body", (0, 0, -0.11), (1.0, 0.5, 0.3), 0.05, SurfaceMaterial((0.7, 0.1, 0.1), 0.4, 0.2), node="car")
    cabin = _box_surface(spec, "cabin", (0, 0, 0.14), (0.5, 0.45, 0.2), 0.05, SurfaceMaterial((0.1, 0.1, 0.15), 0.1, 0.05), node="car")
    illum = _illumination(spec, Illumination.constant_sky(0.4, sun_direction=(0.3, -0.4, 0.87), sun_intensity=(1.5, 1.5, 1.5)))
    rig = orbit_rig((0, 0, 0.2), 1.8, 1.0, _arc(spec.num_frames, -60.0, 80.0), spec.image_size, spec.fov_deg)
    parked = Pose.from_yaw(CAR_YAW, CAR_CENTER)
    box = OrientedBox("car", np.asarray(CAR_CENTER), np.asarray(CAR_SIZE), CAR_YAW, [(t, copy.deepcopy(parked)) for t in rig.timestamps])
    scene, labels, names = assemble_scene([ground, body, cabin], illum, {"car": box.trajectory()})
    return TemplateScene(scene, labels, names, rig, boxes=[box])


def template_box_plane(spec: SynthSpec) -> TemplateScene:
    ground = _ground(spec, SurfaceMaterial((0.4, 0.5, 0.4), 0.5, 0.0), spacing=0.08)
    block = _box_surface(spec, "block", (0.2, -0.1, 0.15), (0.3, 0.5, 0.3), 0.05, SurfaceMaterial((0.8, 0.7, 0.2), 0.7, 0.0))
    illum = _illumination(spec, Illumination.constant_sky(0.6, sun_direction=(-0.5, 0.3, 0.8), sun_intensity=(1.0, 1.0, 1.0)))
    scene, labels, names = assemble_scene([ground, block], illum)
    rig = orbit_rig((0, 0, 0), 0.9, 1.3, _arc(spec.num_frames, 30.0, 60.0), spec.image_size, spec.fov_deg)
    return TemplateScene(scene, labels, names, rig)


TEMPLATES: dict[str, Callable[[SynthSpec], TemplateScene]] = {
    "lambertian-plane": template_lambertian_plane,
    "shadow-pole": template_shadow_pole,
    "wall-vs-whiteboard": template_wall_vs_whiteboard,
    "relight-pair": template_relight_pair,
    "car-mockup": template_car_mockup,
    "box-plane": template_box_plane,
}


def build_template(spec: SynthSpec, config: RunConfig) -> TemplateScene:
    """Instantiate a template and bake its ground-truth sun visibility.

    Raises:
        ConfigError: For an unknown template id.
    """
    builder = TEMPLATES.get(spec.template)
    if builder is None:
        raise ConfigError(f"Unknown template '{spec.template}'. Available: {', '.join(sorted(TEMPLATES))}")
    if spec.num_frames < 1 or spec.image_size < 4:
        raise ConfigError("synth needs num_frames >= 1 and image_size >= 4")
    template = builder(spec)
    bake_scene_sun_visibility(template.scene, template.rig.timestamps[0], config)
    return template


# ---------------------------------------------------------------------------
# ground truth and priors
# ---------------------------------------------------------------------------


def direct_lighting_reference(rho, normal, sky_radiance: float, sun_direction, sun_intensity, sun_visible: float = 1.0) -> np.ndarray:
    """Closed-form Lambertian colour under a constant sky plus sun.

    Independent of the Monte Carlo path: the sky term is the M -> inf limit
    rho/pi * L / 2 of the 1/M estimator.
    """
    rho = np.asarray(rho, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    s = np.asarray(sun_direction, dtype=np.float64)
    s = s / np.linalg.norm(s)
    cos_sun = max(float(n @ s), 0.0)
    sun = sun_visible * np.asarray(sun_intensity, dtype=np.float64) * cos_sun
    return rho / math.pi * (0.5 * sky_radiance + sun)


def render_ground_truth(template: TemplateScene, idx: int, config: RunConfig, illumination: Illumination | None = None) -> RenderedMaps:
    """Reference-quality render of one frame (simulated LiDAR included)."""
    scene = template.scene
    rig = template.rig
    gaussians = instantiate(scene, rig.timestamps[idx])
    with torch.no_grad():
        return render_view(
            gaussians, rig, idx, illumination or scene.illumination, config,
            config.render.samples_reference, color_path="pbr", simulate_lidar=True,
        )


def region_map(maps: RenderedMaps, labels: np.ndarray) -> np.ndarray:
    """Exact surface labels from the dominant primitive per pixel, 0 where empty."""
    dominant = maps.blend.dominant()
    out = np.zeros(dominant.shape, dtype=np.int64)
    hit = dominant >= 0
    out[hit] = labels[dominant[hit]]
    return out


def _bias_field(rng: np.random.Generator, height: int, width: int, channels: int, amplitude: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(4, 4, channels))
    zoom = (height / 4.0, width / 4.0, 1.0)
    smooth = ndimage.zoom(coarse, zoom, order=1, mode="nearest")[:height, :width]
    return amplitude * smooth


def make_priors(maps: RenderedMaps, spec: SynthSpec, idx: int, config: RunConfig) -> dict[str, np.ndarray]:
    """Ground-truth normal/albedo/roughness maps, corrupted when spec.noise > 0.

    noise scales both the per-pixel Gaussian noise (synth.prior_noise_sigma)
    and the low-frequency bias (synth.bias_amplitude); noise = 1 gives the
    default corruption strength.
    """
    arrays = maps.numpy()
    priors = {
        "normal": arrays["normal"].copy(),
        "albedo": arrays["rgb_albedo"].copy(),
        "rough": arrays["roughness"].copy(),
    }
    if spec.noise <= 0:
        return priors
    rng = np.random.default_rng([spec.seed, idx])
    sigma = config.synth.prior_noise_sigma * spec.noise
    amp = config.synth.bias_amplitude * spec.noise
    covered = arrays["alpha"] > 0
    for name, prior in priors.items():
        h, w, c = prior.shape
        corrupted = prior + rng.normal(0.0, sigma, size=prior.shape) + _bias_field(rng, h, w, c, amp)
        if name == "normal":
            length = np.linalg.norm(corrupted, axis=-1, keepdims=True)
            corrupted = corrupted / np.maximum(length, 1e-12)
        else:
            corrupted = np.clip(corrupted, 0.0, 1.0)
        priors[name] = np.where(covered, corrupted, prior)
    return priors


def light_mask(maps: RenderedMaps) -> np.ndarray:
    """Pixels usable for the colour loss: covered and not saturated."""
    arrays = maps.numpy()
    return ((arrays["alpha"][:, :, 0] > 0.5) & (arrays["color"].max(axis=-1) < 1.0)).astype(np.uint16)


def _write_frame(
    layout: DatasetLayout,
    template: TemplateScene,
    spec: SynthSpec,
    idx: int,
    config: RunConfig,
    alt_template: TemplateScene | None = None,
) -> np.ndarray:
    maps = render_ground_truth(template, idx, config)
    arrays = maps.numpy()
    write_map(layout.frame_image(idx), arrays["color"])
    write_pointcloud(layout.lidar_points(idx), maps.returns)

    write_map(layout.gt_map(idx, "color"), arrays["color"])
    write_map(layout.gt_map(idx, "albedo"), arrays["rgb_albedo"])
    write_map(layout.gt_map(idx, "rough"), arrays["roughness"])
    write_map(layout.gt_map(idx, "lidar_albedo"), arrays["lidar_albedo"])
    write_map(layout.gt_map(idx, "intensity"), arrays["lidar_intensity"])
    write_map(layout.gt_map(idx, "mask"), arrays["lidar_mask"])
    write_map(layout.gt_map(idx, "normal"), encode_normals(arrays["normal"]))
    if alt_template is not None:
        write_map(layout.gt_map(idx, "color_alt"), render_ground_truth(alt_template, idx, config).numpy()["color"])

    priors = make_priors(maps, spec, idx, config)
    write_map(layout.prior_map(idx, "normal"), encode_normals(priors["normal"]))
    write_map(layout.prior_map(idx, "albedo"), priors["albedo"])
    write_map(layout.prior_map(idx, "rough"), priors["rough"])
    write_labels(layout.light_mask(idx), light_mask(maps))
    write_labels(layout.regions(idx), region_map(maps, template.labels))
    logger.info("synth frame=%d returns=%d", idx, maps.returns.shape[0])
    return maps.returns


def generate(spec: SynthSpec, out_dir: str | Path, config: RunConfig) -> DatasetLayout:
    """Write a complete dataset directory for the requested template.

    Frames render in a thread pool capped by INVRL_THREADS; each frame's
    output depends only on (spec, frame index), so the result is identical
    for any pool size.
    """
    template = build_template(spec, config)
    layout = DatasetLayout(Path(out_dir))
    layout.ensure_dirs()
    save_rig(layout.rig_path, layout.poses_path, template.rig)
    save_scene(layout.gt_scene_path, template.scene)
    save_illumination(layout.gt_dir / "illumination.json", template.scene.illumination)
    if template.alt_illumination is not None:
        save_illumination(layout.gt_dir / "illumination_alt.json", template.alt_illumination)
    if template.boxes:
        write_boxes(layout.boxes_path, template.boxes)
    labels = "\n".join(f"{k} = {name}" for k, name in enumerate(template.surfaces, start=1))
    atomic_write_text(layout.spec_path, spec.describe() + f"primitives = {template.scene.primitive_count()}\n" + labels + "\n")

    alt_template = None
    if template.alt_illumination is not None:
        alt_scene = relight(template.scene, template.alt_illumination, config, template.rig.timestamps[0])
        alt_template = replace(template, scene=alt_scene)

    frames = range(len(template.rig))
    workers = thread_cap() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        returns = list(pool.map(lambda i: _write_frame(layout, template, spec, i, config, alt_template), frames))
    cloud = np.concatenate(returns) if returns else np.zeros((0, 4))
    write_pointcloud(layout.pointcloud_path, cloud)
    logger.info("synth template=%s frames=%d points=%d out=%s", spec.template, len(template.rig), cloud.shape[0], layout.root)
    return layout


# ---------------------------------------------------------------------------
# relighting and object insertion
# ---------------------------------------------------------------------------


def relight(scene: SceneGraph, new_illum: Illumination, config: RunConfig, t: float | None = None) -> SceneGraph:
    """Copy of scene under new_illum with v_sun re-baked; materials untouched."""
    out = scene.clone()
    out.illumination = new_illum.clone()
    if t is None:
        span = out.time_range()
        t = span[0] if span is not None else 0.0
    bake_scene_sun_visibility(out, t, config)
    return out


def insert_node(
    src: SceneGraph,
    node_index: int,
    dst: SceneGraph,
    offset: Sequence[float] = (0.0, 0.0, 0.0),
    timestamps: Sequence[float] | None = None,
) -> SceneGraph:
    """Copy a dynamic node of src into dst, shifted by a world offset.

    With timestamps the node is parked at its first keyframe pose for those
    times, so it can join a scene recorded on a different clock.
    """
    if not 0 <= node_index < len(src.dynamic_nodes):
        raise DataError(f"node index {node_index} out of range (scene has {len(src.dynamic_nodes)} nodes)")
    node = src.dynamic_nodes[node_index]
    shift = np.asarray(offset, dtype=np.float64)
    if timestamps is not None:
        first = node.trajectory.poses[0]
        trajectory = Trajectory.static(Pose(first.rotation.copy(), first.translation + shift), timestamps)
    else:
        trajectory = Trajectory(
            node.trajectory.timestamps.copy(),
            [Pose(p.rotation.copy(), p.translation + shift) for p in node.trajectory.poses],
        )
    out = dst.clone()
    out.dynamic_nodes.append(DynamicNode(node.name, node.gaussians.detach(), trajectory))
    return out


# ---------------------------------------------------------------------------
# night simulation
# ---------------------------------------------------------------------------


@dataclass
class Spotlight:
    position: np.ndarray
    direction: np.ndarray
    intensity: np.ndarray
    half_angle_deg: float = 30.0
    exponent: float = 8.0

    @classmethod
    def create(cls, position, direction, intensity=1.0, half_angle_deg: float = 30.0, exponent: float = 8.0) -> "Spotlight":
        d = np.asarray(direction, dtype=np.float64)
        return cls(
            np.asarray(position, dtype=np.float64),
            d / np.linalg.norm(d),
            np.broadcast_to(np.asarray(intensity, dtype=np.float64), (3,)).copy(),
            half_angle_deg,
            exponent,
        )


def load_spotlights(path: str | Path, config: RunConfig | None = None) -> list[Spotlight]:
    """Read {"spotlights": [{"position", "direction", "intensity", ...}]}."""
    lights_path = require_file(path, "spotlight file")
    payload = read_json(lights_path)
    night = config.night if config is not None else None
    lights = []
    try:
        for entry in payload.get("spotlights", []):
            lights.append(Spotlight.create(
                entry["position"],
                entry["direction"],
                entry.get("intensity", 1.0),
                float(entry.get("half_angle_deg", night.cone_half_angle_deg if night else 30.0)),
                float(entry.get("exponent", night.cone_exponent if night else 8.0)),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{lights_path}: malformed spotlight entry ({exc})") from exc
    return lights


def spotlight_radiance(gaussians: GaussianSet, eye: torch.Tensor, lights: Sequence[Spotlight], f0: float = 0.04) -> torch.Tensor:
    """Sum of I0 * cone(w) * f_r * cos / d^2 over spotlights, per primitive (N, 3).

    The cone falloff is cos^exponent of the off-axis angle inside the half
    angle and zero outside. Spotlights cast no shadows.
    """
    n = len(gaussians)
    out = torch.zeros((n, 3), dtype=DTYPE)
    if n == 0 or not lights:
        return out
    view = eye - gaussians.means
    view = view / view.norm(dim=-1, keepdim=True)
    for light in lights:
        to_light = torch.as_tensor(light.position, dtype=DTYPE) - gaussians.means
        dist2 = torch.sum(to_light * to_light, -1)
        w_i = to_light / torch.sqrt(dist2).unsqueeze(-1)
        axis = torch.as_tensor(light.direction, dtype=DTYPE)
        cos_axis = -(w_i @ axis)
        inside = cos_axis >= math.cos(math.radians(light.half_angle_deg))
        cone = torch.where(inside, torch.clamp(cos_axis, min=0.0) ** light.exponent, torch.zeros_like(cos_axis))
        cos_n = torch.clamp(torch.sum(gaussians.normals * w_i, -1), min=0.0)
        fr = cook_torrance_fr(w_i, view, gaussians.normals, gaussians.rgb_albedo, gaussians.roughness, f0)
        scale = cone * cos_n / dist2
        out = out + torch.as_tensor(light.intensity, dtype=DTYPE) * fr * scale.unsqueeze(-1)
    return out


def night_scene(scene: SceneGraph, sky_epsilon: float) -> SceneGraph:
    """Sun removed and the sky replaced by a small constant."""
    out = scene.clone()
    out.illumination = Illumination.constant_sky(sky_epsilon, sun_direction=scene.illumination.sun_direction.tolist())
    return out


def night_sim(
    scene: SceneGraph,
    lights: Sequence[Spotlight],
    rig: SensorRig,
    t: float,
    config: RunConfig,
    sky_epsilon: float | None = None,
    mode_samples: int | None = None,
) -> RenderedMaps:
    """Render frame t at night: dim constant sky plus spotlights."""
    eps = config.night.sky_epsilon if sky_epsilon is None else sky_epsilon
    night = night_scene(scene, eps)
    frame = rig.frame_at(t)
    gaussians = instantiate(night, t)
    eye = torch.as_tensor(rig.camera_poses[frame].translation, dtype=DTYPE)
    samples = mode_samples or config.render.samples_final
    with torch.no_grad():
        if eps > 0 and len(gaussians):
            shaded = shade_primitives(gaussians, eye, night.illumination, samples, config)
        else:
            shaded = torch.zeros((len(gaussians), 3), dtype=DTYPE)
        shaded = shaded + spotlight_radiance(gaussians, eye, lights, config.shading.f0)
        maps = rasterize(gaussians, rig, frame, shaded, config)
        intensity, albedo, mask, returns = render_lidar(gaussians, rig, frame, config, maps.blend)
    maps.lidar_intensity = intensity
    maps.lidar_albedo = albedo
    maps.lidar_mask = mask
    maps.returns = returns
    return maps
