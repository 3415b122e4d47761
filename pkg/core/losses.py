"""
Loss terms of the inverse-rendering objective and prior-map ingestion.

Maps are (H, W, C) float64 tensors. Normal maps are compared in [-1, 1]
camera space; prior files store them encoded as (n + 1) / 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from config import LossConfig
from core.maps_io import read_labels, read_pfm
from core.scenegraph import DTYPE
from core.validator import validate_map_shape

logger = logging.getLogger(__name__)

TERMS = ("lidar", "rgb", "normal", "material", "rgb_to_lidar", "lidar_to_rgb")


@dataclass
class PriorBundle:
    """Offline priors for one frame; any field may be missing."""

    normal: torch.Tensor | None = None
    albedo: torch.Tensor | None = None
    roughness: torch.Tensor | None = None
    light_mask: torch.Tensor | None = None
    regions: torch.Tensor | None = None

    @property
    def has_normal(self) -> bool:
        return self.normal is not None

    @property
    def has_material(self) -> bool:
        return self.albedo is not None and self.roughness is not None


@dataclass
class LossWeights:
    lidar: float = 1.0
    rgb: float = 1.0
    normal: float = 0.1
    material: float = 0.1
    rgb_to_lidar: float = 0.05
    lidar_to_rgb: float = 0.05
    sigma: float = 0.1

    @classmethod
    def from_config(cls, cfg: LossConfig) -> "LossWeights":
        return cls(
            lidar=cfg.lambda_lidar,
            rgb=cfg.lambda_rgb,
            normal=cfg.lambda_normal,
            material=cfg.lambda_material,
            rgb_to_lidar=cfg.lambda_rgb_to_lidar,
            lidar_to_rgb=cfg.lambda_lidar_to_rgb,
            sigma=cfg.sigma,
        )

    def weight(self, term: str) -> float:
        return float(getattr(self, term))

    def for_stage(self, stage: int) -> "LossWeights":
        """Stage 1 runs without the two consistency terms."""
        if stage == 1:
            return replace(self, rgb_to_lidar=0.0, lidar_to_rgb=0.0)
        return self

    def for_priors(self, priors: PriorBundle) -> "LossWeights":
        """Zero the prior weights whose maps are unavailable."""
        weights = self
        if not priors.has_normal and self.normal:
            logger.warning("normal prior missing; normal loss disabled")
            weights = replace(weights, normal=0.0)
        if not priors.has_material and self.material:
            logger.warning("material prior missing; material loss disabled")
            weights = replace(weights, material=0.0)
        if priors.regions is None and self.lidar_to_rgb:
            logger.warning("region map missing; LiDAR-to-RGB consistency disabled")
            weights = replace(weights, lidar_to_rgb=0.0)
        return weights


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rgb(pred: torch.Tensor, target: torch.Tensor, light_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error, restricted to light_mask pixels when given."""
    _check_shapes(pred, target, "loss_rgb")
    sq = (pred - target) ** 2
    if light_mask is None:
        return sq.mean()
    mask = light_mask.reshape(pred.shape[:-1] + (1,)).to(DTYPE)
    count = mask.sum() * pred.shape[-1]
    if count == 0:
        return sq.sum() * 0.0
    return (sq * mask).sum() / count


def loss_lidar(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared intensity error at masked pixels, normalised by the mask count."""
    _check_shapes(pred, target, "loss_lidar")
    m = mask.reshape(pred.shape).to(DTYPE)
    count = m.sum()
    if count == 0:
        logger.debug("LiDAR mask is empty; intensity loss is 0")
        return ((pred - target) * m).sum() * 0.0
    return (((pred - target) * m) ** 2).sum() / count


def loss_normal(normal: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Per-pixel squared vector distance, averaged over pixels."""
    _check_shapes(normal, prior, "loss_normal")
    return ((normal - prior) ** 2).sum(dim=-1).mean()


def loss_material(
    albedo: torch.Tensor, albedo_prior: torch.Tensor, roughness: torch.Tensor, roughness_prior: torch.Tensor
) -> torch.Tensor:
    _check_shapes(albedo, albedo_prior, "loss_material")
    _check_shapes(roughness, roughness_prior, "loss_material")
    return ((albedo - albedo_prior) ** 2).mean() + ((roughness - roughness_prior) ** 2).mean()


def loss_prior(
    normal: torch.Tensor,
    normal_prior: torch.Tensor | None,
    material: tuple[torch.Tensor, torch.Tensor],
    material_prior: tuple[torch.Tensor, torch.Tensor] | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(normal, material) prior losses; a missing prior yields 0 for its term."""
    zero = torch.zeros((), dtype=DTYPE)
    nor = loss_normal(normal, normal_prior) if normal_prior is not None else zero
    mat = loss_material(material[0], material_prior[0], material[1], material_prior[1]) if material_prior is not None else zero
    return nor, mat


def loss_rgb_to_lidar(b_lidar: torch.Tensor, b_rgb: torch.Tensor, sigma: float = 0.1, radius: int = 1) -> torch.Tensor:
    """Edge-aware smoothness of LiDAR albedo guided by RGB albedo.

    Sum over every pixel p and neighbour q (ordered pairs) of
    |L_p - L_q| exp(-||C_p - C_q||^2 / sigma^2).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    height, width = b_lidar.shape[:2]
    total = torch.zeros((), dtype=DTYPE)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            py = slice(max(0, -dy), height - max(0, dy))
            px = slice(max(0, -dx), width - max(0, dx))
            qy = slice(max(0, dy), height - max(0, -dy))
            qx = slice(max(0, dx), width - max(0, -dx))
            diff = torch.abs(b_lidar[py, px] - b_lidar[qy, qx]).sum(dim=-1)
            color = ((b_rgb[py, px] - b_rgb[qy, qx]) ** 2).sum(dim=-1)
            total = total + (diff * torch.exp(-color / (sigma * sigma))).sum()
    return total


def loss_lidar_to_rgb(
    b_rgb: torch.Tensor,
    b_lidar: torch.Tensor,
    regions: torch.Tensor,
    bins: int = 8,
    normalize: bool = True,
) -> torch.Tensor:
    """Variance of RGB albedo within (region, quantised LiDAR albedo) groups.

    Per-channel population variances are summed over groups of at least two
    pixels; the total is divided by the number of such groups when normalize
    is set. Bin assignment carries no gradient.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    rgb = b_rgb.reshape(-1, b_rgb.shape[-1])
    lid = b_lidar.detach().reshape(-1)
    labels = torch.as_tensor(regions).reshape(-1).to(torch.int64)
    bin_idx = torch.clamp(torch.floor(lid * bins), 0, bins - 1).to(torch.int64)
    _, group = torch.unique(labels * bins + bin_idx, return_inverse=True)
    n_groups = int(group.max()) + 1 if group.numel() else 0
    if n_groups == 0:
        return rgb.sum() * 0.0

    counts = torch.bincount(group, minlength=n_groups).to(DTYPE)
    sums = torch.zeros((n_groups, rgb.shape[1]), dtype=DTYPE).index_add(0, group, rgb)
    means = sums / counts.unsqueeze(-1)
    dev = rgb - means[group]
    var = torch.zeros((n_groups, rgb.shape[1]), dtype=DTYPE).index_add(0, group, dev * dev) / counts.unsqueeze(-1)
    valid = counts >= 2
    total = (var.sum(dim=-1) * valid.to(DTYPE)).sum()
    n_valid = int(valid.sum())
    if normalize and n_valid:
        total = total / n_valid
    return total


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the active terms plus a per-term breakdown.

    The breakdown holds raw term values and their weighted contributions
    (``w_<term>``) so inactive terms show a zero contribution.
    """
    total = torch.zeros((), dtype=DTYPE)
    breakdown: dict[str, float] = {}
    for name in TERMS:
        value = terms.get(name)
        if value is None:
            breakdown[name] = 0.0
            breakdown[f"w_{name}"] = 0.0
            continue
        lam = weights.weight(name)
        if lam:
            total = total + lam * value
        breakdown[name] = float(value.detach())
        breakdown[f"w_{name}"] = lam * float(value.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


def compute_terms(
    maps,
    color: torch.Tensor,
    intensity: torch.Tensor,
    priors: PriorBundle,
    weights: LossWeights,
    neighborhood_radius: int = 1,
    variance_bins: int = 8,
) -> dict[str, torch.Tensor]:
    """Evaluate every term with a non-zero weight against one frame's targets."""
    terms: dict[str, torch.Tensor] = {
        "rgb": loss_rgb(maps.color, color, priors.light_mask),
        "lidar": loss_lidar(maps.lidar_intensity, intensity, maps.lidar_mask),
    }
    if weights.normal and priors.has_normal:
        terms["normal"] = loss_normal(maps.normal, priors.normal)
    if weights.material and priors.has_material:
        terms["material"] = loss_material(maps.rgb_albedo, priors.albedo, maps.roughness, priors.roughness)
    if weights.rgb_to_lidar:
        terms["rgb_to_lidar"] = loss_rgb_to_lidar(maps.lidar_albedo, maps.rgb_albedo, weights.sigma, neighborhood_radius)
    if weights.lidar_to_rgb and priors.regions is not None:
        terms["lidar_to_rgb"] = loss_lidar_to_rgb(maps.rgb_albedo, maps.lidar_albedo, priors.regions, variance_bins)
    return terms


# ---------------------------------------------------------------------------
# prior ingestion
# ---------------------------------------------------------------------------


def encode_normals(normals: np.ndarray) -> np.ndarray:
    return (np.asarray(normals, dtype=np.float64) + 1.0) / 2.0


def decode_normals(encoded: np.ndarray) -> np.ndarray:
    return np.asarray(encoded, dtype=np.float64) * 2.0 - 1.0


def _optional_map(path: Path, name: str, height: int, width: int, channels: int) -> torch.Tensor | None:
    if not path.exists():
        logger.warning("prior file missing: %s", path)
        return None
    array = read_pfm(path)
    validate_map_shape(name, array, height, width, channels, path)
    return torch.as_tensor(array, dtype=DTYPE)


def load_prior_bundle(layout, idx: int, height: int, width: int) -> PriorBundle:
    """Read frame_{idx}_{normal|albedo|rough}.pfm, the light mask and regions.

    Missing files leave the field empty; the matching loss is then skipped.
    """
    normal = _optional_map(layout.prior_map(idx, "normal"), "normal prior", height, width, 3)
    if normal is not None:
        normal = torch.as_tensor(decode_normals(normal.numpy()), dtype=DTYPE)
    albedo = _optional_map(layout.prior_map(idx, "albedo"), "albedo prior", height, width, 3)
    rough = _optional_map(layout.prior_map(idx, "rough"), "roughness prior", height, width, 1)

    light = None
    if layout.light_mask(idx).exists():
        mask = read_labels(layout.light_mask(idx))
        validate_map_shape("light mask", mask[:, :, None], height, width, 1, layout.light_mask(idx))
        light = torch.as_tensor((mask > 0).astype(np.float64)[:, :, None], dtype=DTYPE)

    regions = None
    if layout.regions(idx).exists():
        labels = read_labels(layout.regions(idx))
        validate_map_shape("region map", labels[:, :, None], height, width, 1, layout.regions(idx))
        regions = torch.as_tensor(labels, dtype=torch.int64)
    else:
        logger.warning("region map missing: %s", layout.regions(idx))
    return PriorBundle(normal=normal, albedo=albedo, roughness=rough, light_mask=light, regions=regions)
