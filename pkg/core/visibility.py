"""
Fibonacci hemisphere sampling and a BVH occlusion tracer over Gaussian
ellipsoids.

The BVH is stored as flat numpy arrays and traversed as a wavefront of
(ray, node) pairs, so a whole batch of rays advances one tree level per
iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from core.scenegraph import DTYPE, GaussianSet

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
MAX_DEPTH = 64
BOX_PAD = 1e-9


@dataclass
class SampleSet:
    """M unit directions in the hemisphere around a normal."""

    directions: np.ndarray
    count: int


@dataclass
class Bvh:
    """Flat BVH over primitive 3-sigma ellipsoids.

    Leaves have left == right == -1 and own prim_order[start:start + count].
    """

    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prim_order: np.ndarray
    means: np.ndarray
    # Rows of to_unit map world offsets into the unit-sphere frame of each ellipsoid.
    to_unit: np.ndarray
    opacities: np.ndarray
    depth: int

    @property
    def node_count(self) -> int:
        return int(self.left.shape[0])

    @property
    def primitive_count(self) -> int:
        return int(self.means.shape[0])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def orthonormal_basis(normals: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Branchless tangent frame (b1, b2) for unit normals."""
    nx, ny, nz = normals[..., 0], normals[..., 1], normals[..., 2]
    sign = torch.where(nz >= 0, torch.ones_like(nz), -torch.ones_like(nz))
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    b1 = torch.stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx], dim=-1)
    b2 = torch.stack([b, sign + ny * ny * a, -ny], dim=-1)
    return b1, b2


def fibonacci_local(count: int) -> torch.Tensor:
    """Fibonacci spiral on the upper hemisphere, first point at the pole."""
    if count < 1:
        raise ValueError("sample count must be >= 1")
    i = torch.arange(count, dtype=DTYPE)
    z = 1.0 - i / count
    r = torch.sqrt(torch.clamp(1.0 - z * z, min=0.0))
    phi = i * GOLDEN_ANGLE
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)


def hemisphere_directions(normals: torch.Tensor, count: int) -> torch.Tensor:
    """(..., 3) normals -> (..., count, 3) world directions; differentiable in normals."""
    local = fibonacci_local(count)
    b1, b2 = orthonormal_basis(normals)
    return (
        local[:, 0, None] * b1.unsqueeze(-2)
        + local[:, 1, None] * b2.unsqueeze(-2)
        + local[:, 2, None] * normals.unsqueeze(-2)
    )


def fibonacci_hemisphere(normal, count: int) -> SampleSet:
    n = torch.as_tensor(np.asarray(normal, dtype=np.float64), dtype=DTYPE)
    n = n / n.norm()
    return SampleSet(hemisphere_directions(n, count).numpy(), count)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def ellipsoid_frames(gaussians: GaussianSet, sigma_extent: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """World-to-unit-sphere matrices and world AABB half-extents of each ellipsoid."""
    rot = gaussians.rotation_matrices().detach().cpu().numpy()
    radii = sigma_extent * gaussians.scales.detach().cpu().numpy()
    to_unit = np.transpose(rot, (0, 2, 1)) / radii[:, :, None]
    half = np.sqrt(np.einsum("nij,nj->ni", rot * rot, radii * radii))
    return to_unit, half


def build_bvh(gaussians: GaussianSet, sigma_extent: float = 3.0, leaf_size: int = 4) -> Bvh:
    """Median split on the longest centroid axis, built iteratively."""
    means = gaussians.means.detach().cpu().numpy().astype(np.float64)
    opacities = gaussians.opacities.detach().cpu().numpy().astype(np.float64)
    n = means.shape[0]
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        return Bvh(np.zeros((0, 3)), np.zeros((0, 3)), empty_i, empty_i, empty_i, empty_i, empty_i,
                   means, np.zeros((0, 3, 3)), opacities, 0)

    to_unit, half = ellipsoid_frames(gaussians, sigma_extent)
    prim_min = means - half
    prim_max = means + half
    pad = BOX_PAD * (1.0 + np.abs(prim_min).max(initial=0.0) + np.abs(prim_max).max(initial=0.0))

    box_min: list[np.ndarray] = []
    box_max: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []
    order: list[np.ndarray] = []
    placed = 0
    depth_max = 0

    def new_node() -> int:
        box_min.append(np.zeros(3))
        box_max.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    stack = [(new_node(), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        depth_max = max(depth_max, depth)
        box_min[node] = prim_min[idx].min(axis=0) - pad
        box_max[node] = prim_max[idx].max(axis=0) + pad
        if idx.size <= leaf_size or depth >= MAX_DEPTH:
            start[node] = placed
            count[node] = int(idx.size)
            order.append(idx)
            placed += int(idx.size)
            continue
        centroids = means[idx]
        axis = int(np.argmax(centroids.max(axis=0) - centroids.min(axis=0)))
        ranked = idx[np.argsort(centroids[:, axis], kind="stable")]
        mid = ranked.size // 2
        lo, hi = new_node(), new_node()
        left[node], right[node] = lo, hi
        stack.append((hi, ranked[mid:], depth + 1))
        stack.append((lo, ranked[:mid], depth + 1))

    logger.debug("built BVH: %d primitives, %d nodes, depth %d", n, len(left), depth_max)
    return Bvh(
        box_min=np.asarray(box_min),
        box_max=np.asarray(box_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        prim_order=np.concatenate(order).astype(np.int64),
        means=means,
        to_unit=to_unit,
        opacities=opacities,
        depth=depth_max,
    )


# ---------------------------------------------------------------------------
# intersection kernels
# ---------------------------------------------------------------------------


def _slab(bvh: Bvh, nodes: np.ndarray, origins: np.ndarray, inv_dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(over="ignore", invalid="ignore"):
        t0 = (bvh.box_min[nodes] - origins) * inv_dirs
        t1 = (bvh.box_max[nodes] - origins) * inv_dirs
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    return t_near, t_far


def _ellipsoid_entry(
    bvh: Bvh,
    prims: np.ndarray,
    origins: np.ndarray,
    dirs: np.ndarray,
    threshold: float,
    exclude: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Entry test of rays against ellipsoids: (hit mask, entry parameter).

    A ray hits when the opacity gate passes, the origin lies outside the
    ellipsoid and the ray enters it at t > 0.
    """
    frame = bvh.to_unit[prims]
    o = np.einsum("nij,nj->ni", frame, origins - bvh.means[prims])
    d = np.einsum("nij,nj->ni", frame, dirs)
    a = np.einsum("ni,ni->n", d, d)
    b = 2.0 * np.einsum("ni,ni->n", o, d)
    c = np.einsum("ni,ni->n", o, o) - 1.0
    disc = b * b - 4.0 * a * c
    hit = (bvh.opacities[prims] >= threshold) & (c > 0) & (b < 0) & (disc >= 0) & (prims != exclude)
    t = np.full(prims.shape[0], np.inf)
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    return hit, t


def _expand_leaves(bvh: Bvh, rays: np.ndarray, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = bvh.count[nodes]
    total = int(counts.sum())
    ray_rep = np.repeat(rays, counts)
    base = np.repeat(bvh.start[nodes], counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return ray_rep, bvh.prim_order[base + offset]


def _safe_inverse(dirs: np.ndarray) -> np.ndarray:
    return 1.0 / np.where(dirs == 0.0, 1e-300, dirs)


def _occluded_chunk(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, threshold: float, exclude: np.ndarray) -> np.ndarray:
    n_rays = origins.shape[0]
    blocked = np.zeros(n_rays, dtype=bool)
    inv = _safe_inverse(dirs)
    rays = np.arange(n_rays)
    nodes = np.zeros(n_rays, dtype=np.int64)
    while rays.size:
        live = ~blocked[rays]
        rays, nodes = rays[live], nodes[live]
        t_near, t_far = _slab(bvh, nodes, origins[rays], inv[rays])
        inside = t_far >= np.maximum(t_near, 0.0)
        rays, nodes = rays[inside], nodes[inside]
        leaf = bvh.left[nodes] < 0
        if np.any(leaf):
            ray_rep, prims = _expand_leaves(bvh, rays[leaf], nodes[leaf])
            hit, _ = _ellipsoid_entry(bvh, prims, origins[ray_rep], dirs[ray_rep], threshold, exclude[ray_rep])
            blocked[ray_rep[hit]] = True
        inner_rays, inner_nodes = rays[~leaf], nodes[~leaf]
        rays = np.concatenate([inner_rays, inner_rays])
        nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])
    return blocked


def _closest_chunk(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_p = np.full(n_rays, -1, dtype=np.int64)
    no_exclude = np.full(n_rays, -1, dtype=np.int64)
    inv = _safe_inverse(dirs)
    rays = np.arange(n_rays)
    nodes = np.zeros(n_rays, dtype=np.int64)
    while rays.size:
        t_near, t_far = _slab(bvh, nodes, origins[rays], inv[rays])
        inside = (t_far >= np.maximum(t_near, 0.0)) & (t_near <= best_t[rays])
        rays, nodes = rays[inside], nodes[inside]
        leaf = bvh.left[nodes] < 0
        if np.any(leaf):
            ray_rep, prims = _expand_leaves(bvh, rays[leaf], nodes[leaf])
            hit, t = _ellipsoid_entry(bvh, prims, origins[ray_rep], dirs[ray_rep], threshold, no_exclude[ray_rep])
            ray_rep, prims, t = ray_rep[hit], prims[hit], t[hit]
            # ties resolved toward the lower primitive index
            order = np.lexsort((prims, t))
            ray_rep, prims, t = ray_rep[order], prims[order], t[order]
            first = np.unique(ray_rep, return_index=True)[1]
            r, p, tt = ray_rep[first], prims[first], t[first]
            better = (tt < best_t[r]) | ((tt == best_t[r]) & (p < best_p[r]))
            best_t[r[better]] = tt[better]
            best_p[r[better]] = p[better]
        inner_rays, inner_nodes = rays[~leaf], nodes[~leaf]
        rays = np.concatenate([inner_rays, inner_rays])
        nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])
    return best_t, best_p


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def trace_rays(
    bvh: Bvh,
    origins: np.ndarray,
    dirs: np.ndarray,
    opacity_threshold: float = 0.5,
    exclude: np.ndarray | None = None,
    chunk: int = 65_536,
) -> np.ndarray:
    """Visibility (True = reaches infinity) for a batch of rays."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    if exclude is None:
        exclude = np.full(n_rays, -1, dtype=np.int64)
    visible = np.ones(n_rays, dtype=bool)
    if bvh.node_count == 0 or n_rays == 0:
        return visible
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        visible[lo:hi] = ~_occluded_chunk(bvh, origins[lo:hi], dirs[lo:hi], opacity_threshold, exclude[lo:hi])
    return visible


def trace_visibility(bvh: Bvh, origin, direction, opacity_threshold: float = 0.5, exclude: int = -1) -> int:
    """1 iff no gated primitive ellipsoid is entered along the ray, else 0."""
    visible = trace_rays(
        bvh, np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None],
        opacity_threshold, np.array([exclude], dtype=np.int64),
    )
    return int(visible[0])


def closest_hits(
    bvh: Bvh,
    origins: np.ndarray,
    dirs: np.ndarray,
    opacity_threshold: float = 0.5,
    chunk: int = 65_536,
) -> tuple[np.ndarray, np.ndarray]:
    """(entry distance, primitive) of the first gated ellipsoid per ray; (inf, -1) on a miss."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_p = np.full(n_rays, -1, dtype=np.int64)
    if bvh.node_count == 0:
        return best_t, best_p
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        best_t[lo:hi], best_p[lo:hi] = _closest_chunk(bvh, origins[lo:hi], dirs[lo:hi], opacity_threshold)
    return best_t, best_p


def trace_rays_brute_force(
    bvh: Bvh,
    origins: np.ndarray,
    dirs: np.ndarray,
    opacity_threshold: float = 0.5,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """Linear scan over every primitive; reference for the BVH traversal."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays, n_prims = origins.shape[0], bvh.primitive_count
    if exclude is None:
        exclude = np.full(n_rays, -1, dtype=np.int64)
    visible = np.ones(n_rays, dtype=bool)
    all_prims = np.arange(n_prims)
    for ray in range(n_rays):
        if n_prims == 0:
            break
        hit, _ = _ellipsoid_entry(
            bvh, all_prims, np.broadcast_to(origins[ray], (n_prims, 3)),
            np.broadcast_to(dirs[ray], (n_prims, 3)), opacity_threshold,
            np.full(n_prims, exclude[ray]),
        )
        visible[ray] = not hit.any()
    return visible


def sky_visibility(
    bvh: Bvh,
    means: np.ndarray,
    directions: np.ndarray,
    opacity_threshold: float = 0.5,
    epsilon: float = 1e-3,
    chunk: int = 65_536,
) -> np.ndarray:
    """(N, M) {0, 1} visibility of each primitive's hemisphere samples."""
    n, m = directions.shape[:2]
    dirs = directions.reshape(-1, 3)
    origins = np.repeat(means, m, axis=0) + epsilon * dirs
    exclude = np.repeat(np.arange(n), m)
    visible = trace_rays(bvh, origins, dirs, opacity_threshold, exclude, chunk)
    return visible.reshape(n, m).astype(np.float64)


def bake_sun_visibility(
    gaussians: GaussianSet,
    bvh: Bvh,
    sun_direction,
    opacity_threshold: float = 0.5,
    epsilon: float = 1e-3,
    chunk: int = 65_536,
) -> np.ndarray:
    """Initial per-primitive v_sun by tracing from each mean toward the sun."""
    means = gaussians.means.detach().cpu().numpy()
    n = means.shape[0]
    if torch.is_tensor(sun_direction):
        sun = sun_direction.detach().cpu().numpy().astype(np.float64)
    else:
        sun = np.asarray(sun_direction, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    dirs = np.broadcast_to(sun, (n, 3))
    visible = trace_rays(bvh, means + epsilon * dirs, dirs, opacity_threshold, np.arange(n), chunk)
    return visible.astype(np.float64)
