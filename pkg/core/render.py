"""
Forward rendering: per-primitive PBR shading, EWA splat rasterisation with
front-to-back alpha blending, and the LiDAR intensity pass.

Images are (H, W, C) float64 tensors; pixel centres sit at integer
coordinates and cameras follow the OpenCV convention (+z forward, +y down).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from config import RunConfig
from core.scenegraph import (
    DTYPE,
    GaussianPrimitive,
    GaussianSet,
    Illumination,
    Pose,
    SceneGraph,
    SensorRig,
    instantiate,
)
from core.shading import cook_torrance_fr, eval_sh_sky, lidar_intensity
from core.visibility import (
    Bvh,
    SampleSet,
    build_bvh,
    closest_hits,
    hemisphere_directions,
    sky_visibility,
)

logger = logging.getLogger(__name__)

MODES = ("train", "final", "reference")
DET_MIN = 1e-12


@dataclass
class BlendWeights:
    """Per (pixel, primitive) blend weights of one camera view.

    Pairs are ordered by pixel, then front to back; every attribute map of
    the frame is composited from these same weights.
    """

    height: int
    width: int
    pixel: torch.Tensor
    prim: torch.Tensor
    rank: torch.Tensor
    weight: torch.Tensor

    @property
    def pixel_count(self) -> int:
        return self.height * self.width

    def composite(self, values: torch.Tensor) -> torch.Tensor:
        """Sum_j w_j v_j per pixel for per-primitive values (N,) or (N, C)."""
        vals = values if values.dim() == 2 else values.unsqueeze(-1)
        out = torch.zeros((self.pixel_count, vals.shape[1]), dtype=DTYPE)
        if self.pixel.numel():
            out = out.index_add(0, self.pixel, self.weight.unsqueeze(-1) * vals[self.prim])
        return out.reshape(self.height, self.width, vals.shape[1])

    def first(self, values: torch.Tensor) -> torch.Tensor:
        """Value of the front-most contributing primitive per pixel (0 where none)."""
        vals = values if values.dim() == 2 else values.unsqueeze(-1)
        out = torch.zeros((self.pixel_count, vals.shape[1]), dtype=DTYPE)
        front = (self.rank == 0) & (self.weight.detach() > 0)
        if torch.any(front):
            out = out.index_put((self.pixel[front],), vals[self.prim[front]])
        return out.reshape(self.height, self.width, vals.shape[1])

    def dominant(self) -> np.ndarray:
        """(H, W) index of the largest-weight primitive, -1 where nothing blends."""
        labels = np.full(self.pixel_count, -1, dtype=np.int64)
        if self.pixel.numel() == 0:
            return labels.reshape(self.height, self.width)
        pixel = self.pixel.numpy()
        prim = self.prim.numpy()
        weight = self.weight.detach().numpy()
        order = np.lexsort((prim, -weight, pixel))
        first = np.unique(pixel[order], return_index=True)[1]
        chosen = order[first]
        keep = weight[chosen] > 0
        labels[pixel[chosen][keep]] = prim[chosen][keep]
        return labels.reshape(self.height, self.width)


@dataclass
class RenderedMaps:
    """Per-frame bundle of attribute maps, each (H, W, C)."""

    color: torch.Tensor
    normal: torch.Tensor
    rgb_albedo: torch.Tensor
    roughness: torch.Tensor
    lidar_intensity: torch.Tensor
    lidar_albedo: torch.Tensor
    alpha: torch.Tensor
    lidar_mask: torch.Tensor
    blend: BlendWeights | None = None
    returns: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            name: getattr(self, name).detach().cpu().numpy()
            for name in ("color", "normal", "rgb_albedo", "roughness", "lidar_intensity", "lidar_albedo", "alpha", "lidar_mask")
        }


@dataclass
class Projection:
    means2d: torch.Tensor
    depth: torch.Tensor
    conic: torch.Tensor
    radius: np.ndarray
    valid: np.ndarray


def samples_for_mode(config: RunConfig, mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"unknown render mode '{mode}', expected one of {MODES}")
    return {
        "train": config.render.samples_train,
        "final": config.render.samples_final,
        "reference": config.render.samples_reference,
    }[mode]


# ---------------------------------------------------------------------------
# shading
# ---------------------------------------------------------------------------


def shade(
    normals: torch.Tensor,
    view_dirs: torch.Tensor,
    rgb_albedo: torch.Tensor,
    roughness: torch.Tensor,
    sun_visibility: torch.Tensor,
    sample_dirs: torch.Tensor,
    sample_vis: torch.Tensor,
    illumination: Illumination,
    f0: float = 0.04,
    sun_brdf: bool = True,
) -> torch.Tensor:
    """1/M sum of visible sky radiance plus the sun term, per primitive (N, 3)."""
    n = normals.unsqueeze(-2)
    cos_i = torch.clamp(torch.sum(sample_dirs * n, -1), min=0.0)
    radiance = torch.clamp(eval_sh_sky(illumination.sky_sh, sample_dirs), min=0.0)
    brdf = cook_torrance_fr(
        sample_dirs, view_dirs.unsqueeze(-2), n, rgb_albedo.unsqueeze(-2), roughness.unsqueeze(-1),
        f0,
    )
    sky = torch.mean(sample_vis.unsqueeze(-1) * brdf * radiance * cos_i.unsqueeze(-1), dim=-2)

    sun_dir = illumination.sun_direction / illumination.sun_direction.norm()
    cos_sun = torch.clamp(normals @ sun_dir, min=0.0)
    if sun_brdf:
        sun_fr = cook_torrance_fr(sun_dir.expand_as(normals), view_dirs, normals, rgb_albedo, roughness, f0)
    else:
        sun_fr = torch.ones_like(rgb_albedo)
    sun = sun_visibility.unsqueeze(-1) * sun_fr * illumination.sun_intensity * cos_sun.unsqueeze(-1)
    return sky + sun


def shade_primitive(
    g: GaussianPrimitive,
    view_dir,
    illumination: Illumination,
    samples: SampleSet,
    vis,
    f0: float = 0.04,
    sun_brdf: bool = True,
) -> torch.Tensor:
    """Shaded colour of a single primitive seen along view_dir (pointing away from it)."""
    color = shade(
        _as_tensor(g.normal)[None],
        _as_tensor(view_dir)[None],
        _as_tensor(g.rgb_albedo)[None],
        _as_tensor([g.roughness]),
        _as_tensor([g.sun_visibility]),
        _as_tensor(samples.directions)[None],
        _as_tensor(vis).reshape(1, -1),
        illumination,
        f0,
        sun_brdf,
    )
    return color[0]


def shade_primitives(
    gaussians: GaussianSet,
    eye: torch.Tensor,
    illumination: Illumination,
    samples: int,
    config: RunConfig,
    sky_vis: torch.Tensor | None = None,
    bvh: Bvh | None = None,
) -> torch.Tensor:
    """PBR colours for every primitive seen from eye.

    Sky visibility is traced unless given; tracing is treated as a constant
    (no gradient through the binary gate).
    """
    if len(gaussians) == 0:
        return torch.zeros((0, 3), dtype=DTYPE)
    normals = gaussians.normals
    dirs = hemisphere_directions(normals, samples)
    if sky_vis is None:
        sky_vis = trace_sky_visibility(gaussians, dirs, config, bvh)
    view = eye - gaussians.means
    view = view / view.norm(dim=-1, keepdim=True)
    return shade(
        normals, view, gaussians.rgb_albedo, gaussians.roughness, gaussians.sun_visibility,
        dirs, sky_vis, illumination, config.shading.f0, config.shading.sun_brdf,
    )


def trace_sky_visibility(gaussians: GaussianSet, dirs: torch.Tensor, config: RunConfig, bvh: Bvh | None = None) -> torch.Tensor:
    vis_cfg = config.visibility
    if bvh is None:
        bvh = build_bvh(gaussians, vis_cfg.sigma_extent, vis_cfg.leaf_size)
    vis = sky_visibility(
        bvh, gaussians.means.detach().numpy(), dirs.detach().numpy(),
        vis_cfg.opacity_threshold, vis_cfg.epsilon, vis_cfg.ray_chunk,
    )
    return torch.as_tensor(vis, dtype=DTYPE)


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def world_to_camera(pose: Pose) -> tuple[torch.Tensor, torch.Tensor]:
    rot = torch.as_tensor(pose.rotation.T, dtype=DTYPE)
    return rot, -rot @ torch.as_tensor(pose.translation, dtype=DTYPE)


def project(gaussians: GaussianSet, rig: SensorRig, frame: int, config: RunConfig) -> Projection:
    """EWA projection of every primitive into the frame's camera."""
    cam = rig.camera
    rot, trans = world_to_camera(rig.camera_poses[frame])
    p = gaussians.means @ rot.T + trans
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    front = z > config.render.near_plane
    zs = torch.where(front, z, torch.ones_like(z))
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy

    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / (zs * zs)], dim=-1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / (zs * zs)], dim=-1),
    ], dim=-2)
    cov_cam = rot @ gaussians.covariances() @ rot.T
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    a = cov2d[:, 0, 0] + config.render.dilation
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + config.render.dilation
    det = a * c - b * b
    ok = front & (det > DET_MIN)
    safe_det = torch.where(ok, det, torch.ones_like(det))
    conic = torch.stack([c / safe_det, -b / safe_det, a / safe_det], dim=-1)

    a_n, c_n, det_n = a.detach().numpy(), c.detach().numpy(), safe_det.detach().numpy()
    mid = 0.5 * (a_n + c_n)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det_n))
    radius = np.ceil(3.0 * np.sqrt(lam))
    return Projection(torch.stack([u, v], dim=-1), z, conic, radius, ok.numpy())


def blend_weights(gaussians: GaussianSet, rig: SensorRig, frame: int, config: RunConfig) -> BlendWeights:
    """Build depth-sorted (pixel, primitive) pairs and their blend weights."""
    cam = rig.camera
    height, width = cam.height, cam.width
    empty = torch.zeros(0, dtype=torch.int64)
    if len(gaussians) == 0:
        return BlendWeights(height, width, empty, empty, empty, torch.zeros(0, dtype=DTYPE))

    proj = project(gaussians, rig, frame, config)
    uv = proj.means2d.detach().numpy()
    depth = proj.depth.detach().numpy()
    radius = proj.radius

    x0 = np.clip(np.ceil(uv[:, 0] - radius), 0, width)
    x1 = np.clip(np.floor(uv[:, 0] + radius), -1, width - 1)
    y0 = np.clip(np.ceil(uv[:, 1] - radius), 0, height)
    y1 = np.clip(np.floor(uv[:, 1] + radius), -1, height - 1)
    finite = np.isfinite(uv).all(axis=1) & np.isfinite(radius)
    nx = np.where(proj.valid & finite, np.maximum(x1 - x0 + 1, 0), 0).astype(np.int64)
    ny = np.where(proj.valid & finite, np.maximum(y1 - y0 + 1, 0), 0).astype(np.int64)

    index = np.arange(len(gaussians))
    order = np.lexsort((index, depth))
    order = order[(nx[order] * ny[order]) > 0]
    if order.size == 0:
        return BlendWeights(height, width, empty, empty, empty, torch.zeros(0, dtype=DTYPE))

    counts = nx[order] * ny[order]
    prim = np.repeat(order, counts)
    local = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[prim].astype(np.int64) + local % nx[prim]
    py = y0[prim].astype(np.int64) + local // nx[prim]

    prim_t = torch.as_tensor(prim)
    dx = torch.as_tensor(px, dtype=DTYPE) - proj.means2d[prim_t, 0]
    dy = torch.as_tensor(py, dtype=DTYPE) - proj.means2d[prim_t, 1]
    conic = proj.conic[prim_t]
    power = -0.5 * (conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy)
    alpha = gaussians.opacities[prim_t] * torch.exp(torch.clamp(power, max=0.0))

    keep = alpha.detach().numpy() >= config.render.alpha_min
    if not np.any(keep):
        return BlendWeights(height, width, empty, empty, empty, torch.zeros(0, dtype=DTYPE))
    keep_t = torch.as_tensor(keep)
    alpha = alpha[keep_t]
    prim, pixel = prim[keep], (py * width + px)[keep]

    # stable sort by pixel keeps depth order inside each pixel
    by_pixel = np.argsort(pixel, kind="stable")
    pixel, prim = pixel[by_pixel], prim[by_pixel]
    alpha = alpha[torch.as_tensor(by_pixel)]
    starts = np.r_[0, np.flatnonzero(np.diff(pixel)) + 1]
    run = np.diff(np.r_[starts, pixel.size])
    rank = np.arange(pixel.size) - np.repeat(starts, run)
    slot = np.repeat(np.arange(starts.size), run)

    depth_max = int(rank.max()) + 1
    slot_t, rank_t = torch.as_tensor(slot), torch.as_tensor(rank)
    one_minus = torch.ones((starts.size, depth_max), dtype=DTYPE)
    one_minus = one_minus.index_put((slot_t, rank_t), 1.0 - alpha)
    through = torch.cumprod(one_minus, dim=1)
    before = torch.cat([torch.ones((starts.size, 1), dtype=DTYPE), through[:, :-1]], dim=1)
    transmittance = before[slot_t, rank_t]
    live = transmittance.detach() >= config.render.transmittance_min
    weight = torch.where(live, alpha * transmittance, torch.zeros_like(alpha))
    return BlendWeights(height, width, torch.as_tensor(pixel), torch.as_tensor(prim), rank_t, weight)


def camera_normals(gaussians: GaussianSet, rig: SensorRig, frame: int) -> torch.Tensor:
    rot, _ = world_to_camera(rig.camera_poses[frame])
    return gaussians.normals @ rot.T


def rasterize(
    gaussians: GaussianSet,
    rig: SensorRig,
    frame: int,
    shaded: torch.Tensor,
    config: RunConfig,
    blend: BlendWeights | None = None,
) -> RenderedMaps:
    """Alpha-blend colour, camera-space normals and materials with shared weights.

    LiDAR maps are left at zero; render_lidar fills them.
    """
    if blend is None:
        blend = blend_weights(gaussians, rig, frame, config)
    zeros1 = torch.zeros((rig.camera.height, rig.camera.width, 1), dtype=DTYPE)
    return RenderedMaps(
        color=blend.composite(shaded),
        normal=blend.composite(camera_normals(gaussians, rig, frame)),
        rgb_albedo=blend.composite(gaussians.rgb_albedo),
        roughness=blend.composite(gaussians.roughness),
        lidar_intensity=zeros1,
        lidar_albedo=zeros1.clone(),
        alpha=blend.composite(torch.ones(len(gaussians), dtype=DTYPE)),
        lidar_mask=zeros1.clone(),
        blend=blend,
    )


# ---------------------------------------------------------------------------
# LiDAR
# ---------------------------------------------------------------------------


def primitive_lidar_intensity(gaussians: GaussianSet, origin: torch.Tensor, config: RunConfig, emitted_power: float = 1.0) -> torch.Tensor:
    """Per-primitive intensity seen from the LiDAR origin; d and w_o run from the mean to the sensor."""
    if len(gaussians) == 0:
        return torch.zeros(0, dtype=DTYPE)
    to_sensor = origin - gaussians.means
    distance = to_sensor.norm(dim=-1)
    cos_theta = torch.sum(gaussians.normals * to_sensor, -1) / distance
    shading = config.shading
    return lidar_intensity(
        gaussians.lidar_albedo, gaussians.roughness, cos_theta, distance,
        emitted_power, shading.f0, shading.lidar_model, shading.range_compensated,
    )


def beam_rays(rig: SensorRig, frame: int) -> tuple[np.ndarray, np.ndarray]:
    pose = rig.lidar_poses[frame]
    dirs = rig.lidar.beam_directions() @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return np.ascontiguousarray(origins), dirs


def project_points(points: np.ndarray, rig: SensorRig, frame: int, near: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel (row, col) of world points and a validity mask."""
    pose = rig.camera_poses[frame]
    cam = rig.camera
    p = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = p[:, 2]
    ok = z > near
    zs = np.where(ok, z, 1.0)
    col = np.rint(cam.fx * p[:, 0] / zs + cam.cx).astype(np.int64)
    row = np.rint(cam.fy * p[:, 1] / zs + cam.cy).astype(np.int64)
    ok &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    return np.stack([row, col], axis=1), ok


def render_lidar(
    gaussians: GaussianSet,
    rig: SensorRig,
    frame: int,
    config: RunConfig,
    blend: BlendWeights | None = None,
    lidar_mask: torch.Tensor | np.ndarray | None = None,
    bvh: Bvh | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, np.ndarray]:
    """Intensity map, LiDAR albedo map, mask and simulated returns.

    With lidar_mask given (training) it is passed through; otherwise beams are
    traced and the mask marks pixels where a return projects with intensity
    above the threshold. Returns are (x, y, z, intensity) rows.
    """
    if not rig.lidar.elevations_deg:
        raise ValueError("LiDAR beam table is empty")
    if blend is None:
        blend = blend_weights(gaussians, rig, frame, config)
    origin = torch.as_tensor(rig.lidar_poses[frame].translation, dtype=DTYPE)
    values = primitive_lidar_intensity(gaussians, origin, config, rig.lidar.emitted_power)
    composite = blend.first if config.render.lidar_composite == "first" else blend.composite
    intensity = composite(values)
    albedo = composite(gaussians.lidar_albedo)

    shape = (rig.camera.height, rig.camera.width, 1)
    if lidar_mask is not None:
        mask = _as_tensor(lidar_mask).reshape(shape)
        return intensity, albedo, mask, np.zeros((0, 4))

    mask = torch.zeros(shape, dtype=DTYPE)
    if len(gaussians) == 0:
        return intensity, albedo, mask, np.zeros((0, 4))
    if bvh is None:
        bvh = build_bvh(gaussians, config.visibility.sigma_extent, config.visibility.leaf_size)
    origins, dirs = beam_rays(rig, frame)
    t_hit, prim = closest_hits(bvh, origins, dirs, config.visibility.opacity_threshold, config.visibility.ray_chunk)
    found = prim >= 0
    points = origins[found] + t_hit[found, None] * dirs[found]
    prim = prim[found]
    pix, in_view = project_points(points, rig, frame, config.render.near_plane)

    detached = intensity.detach().numpy()[:, :, 0]
    point_intensity = values.detach().numpy()[prim]
    point_intensity[in_view] = detached[pix[in_view, 0], pix[in_view, 1]]
    lit = in_view & (point_intensity > config.render.lidar_mask_threshold)
    mask_np = np.zeros(shape[:2])
    mask_np[pix[lit, 0], pix[lit, 1]] = 1.0
    mask = torch.as_tensor(mask_np[:, :, None], dtype=DTYPE)
    returns = np.concatenate([points, point_intensity[:, None]], axis=1)
    return intensity, albedo, mask, returns


# ---------------------------------------------------------------------------
# frame pipeline
# ---------------------------------------------------------------------------


def render_view(
    gaussians: GaussianSet,
    rig: SensorRig,
    frame: int,
    illumination: Illumination,
    config: RunConfig,
    samples: int,
    color_path: str = "pbr",
    sky_vis: torch.Tensor | None = None,
    lidar_mask: torch.Tensor | np.ndarray | None = None,
    simulate_lidar: bool = True,
) -> RenderedMaps:
    """Shade, rasterise and run the LiDAR pass for already-instantiated primitives."""
    bvh = None
    if color_path == "pbr":
        needs_trace = sky_vis is None or (simulate_lidar and lidar_mask is None)
        if needs_trace and len(gaussians):
            bvh = build_bvh(gaussians, config.visibility.sigma_extent, config.visibility.leaf_size)
        eye = torch.as_tensor(rig.camera_poses[frame].translation, dtype=DTYPE)
        shaded = shade_primitives(gaussians, eye, illumination, samples, config, sky_vis, bvh)
    elif color_path == "radiance":
        shaded = gaussians.colors
    else:
        raise ValueError(f"unknown colour path '{color_path}'")

    maps = rasterize(gaussians, rig, frame, shaded, config)
    if lidar_mask is None and not simulate_lidar:
        lidar_mask = torch.zeros_like(maps.lidar_mask)
    intensity, albedo, mask, returns = render_lidar(gaussians, rig, frame, config, maps.blend, lidar_mask, bvh)
    maps.lidar_intensity = intensity
    maps.lidar_albedo = albedo
    maps.lidar_mask = mask
    maps.returns = returns
    return maps


def render_frame(
    scene: SceneGraph,
    rig: SensorRig,
    t: float,
    mode: str,
    config: RunConfig,
    color_path: str = "pbr",
) -> RenderedMaps:
    """instantiate -> BVH -> sample -> trace -> shade -> rasterise -> LiDAR pass."""
    frame = rig.frame_at(t)
    gaussians = instantiate(scene, t)
    with torch.no_grad():
        maps = render_view(
            gaussians, rig, frame, scene.illumination, config, samples_for_mode(config, mode), color_path,
        )
    logger.debug("rendered frame=%d t=%s primitives=%d mode=%s", frame, t, len(gaussians), mode)
    return maps


def render_attribute(gaussians: GaussianSet, rig: SensorRig, frame: int, values: torch.Tensor, config: RunConfig) -> torch.Tensor:
    """Blend an arbitrary per-primitive attribute with the frame's weights."""
    return blend_weights(gaussians, rig, frame, config).composite(values)


def mean_hemisphere_cosine(count: int) -> float:
    """Mean n.w over the Fibonacci hemisphere set (the constant-sky estimator factor)."""
    return (count + 1) / (2.0 * count)


def lambertian_sky_color(rho: float, radiance: float, count: int) -> float:
    """Closed-form estimator value for a Lambertian primitive under a constant unoccluded sky."""
    return rho / math.pi * radiance * mean_hemisphere_cosine(count)


def _as_tensor(value) -> torch.Tensor:
    if torch.is_tensor(value):
        return value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
