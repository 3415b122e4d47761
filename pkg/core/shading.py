"""
Closed-form reflectance: GGX microfacet terms, the retro-reflective LiDAR
specular term, LiDAR intensity, Cook-Torrance and the real SH sky.

Every function accepts floats, numpy arrays or float64 tensors and returns a
tensor, so gradients flow when called from the renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64
F0_DEFAULT = 0.04

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass
class BrdfParams:
    rgb_albedo: torch.Tensor = field(default_factory=lambda: torch.full((3,), 0.5, dtype=DTYPE))
    roughness: torch.Tensor = field(default_factory=lambda: torch.tensor(0.5, dtype=DTYPE))
    f0: float = F0_DEFAULT


def _t(value) -> torch.Tensor:
    if torch.is_tensor(value):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def _dot(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.sum(x * y, -1)


def _safe_normalize(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.normalize(x, dim=-1)


def ggx_D(cos_h, tau) -> torch.Tensor:
    """GGX distribution tau^2 / (pi (cos^2 (tau^2 - 1) + 1)^2).

    tau = 0 is the delta limit and evaluates to 0 everywhere.
    """
    cos_h, tau = _t(cos_h), _t(tau)
    a2 = tau * tau
    core = cos_h * cos_h * (a2 - 1.0) + 1.0
    delta = a2 == 0
    safe = torch.where(delta, torch.ones_like(core), core)
    return torch.where(delta, torch.zeros_like(safe), a2 / (math.pi * safe * safe))


def geometry_G_retro(cos_theta) -> torch.Tensor:
    cos_theta = _t(cos_theta)
    return torch.clamp(2.0 * cos_theta * cos_theta, max=1.0)


def fresnel_schlick(cos_theta, f0: float = F0_DEFAULT) -> torch.Tensor:
    return f0 + (1.0 - f0) * (1.0 - _t(cos_theta)) ** 5


def lidar_specular_fs(cos_theta, tau, f0: float = F0_DEFAULT) -> torch.Tensor:
    """Retro-reflective specular term F0 G D / (4 cos^2).

    Raises:
        ValueError: If any cos_theta <= 0; cull backfacing returns first.
    """
    cos_theta = _t(cos_theta)
    if torch.any(cos_theta <= 0):
        raise ValueError("lidar_specular_fs requires cos_theta > 0")
    return _retro_specular(cos_theta, _t(tau), f0)


def _retro_specular(cos_theta: torch.Tensor, tau: torch.Tensor, f0: float) -> torch.Tensor:
    return f0 * geometry_G_retro(cos_theta) * ggx_D(cos_theta, tau) / (4.0 * cos_theta * cos_theta)


def lidar_intensity(
    rho_lidar,
    tau,
    cos_theta,
    distance,
    emitted_power=1.0,
    f0: float = F0_DEFAULT,
    model: str = "full",
    range_compensated: bool = False,
) -> torch.Tensor:
    """(rho/pi + f_s) P_e cos / d^2, zero for backfacing returns.

    model="lambertian" drops f_s; range_compensated drops the d^-2 factor.

    Raises:
        ValueError: If any distance <= 0.
    """
    rho, tau, cos_theta, d = _t(rho_lidar), _t(tau), _t(cos_theta), _t(distance)
    if torch.any(d <= 0):
        raise ValueError("lidar_intensity requires distance > 0")
    front = cos_theta > 0
    safe_cos = torch.where(front, cos_theta, torch.ones_like(cos_theta))
    brdf = rho / math.pi
    if model == "full":
        brdf = brdf + _retro_specular(safe_cos, tau, f0)
    elif model != "lambertian":
        raise ValueError(f"unknown LiDAR model '{model}'")
    value = brdf * _t(emitted_power) * safe_cos
    if not range_compensated:
        value = value / (d * d)
    return torch.where(front, value, torch.zeros_like(value))


def cook_torrance_fr(w_i, w_o, normal, rgb_albedo, tau, f0: float = F0_DEFAULT) -> torch.Tensor:
    """Diffuse rho/pi plus the GGX/Schlick/Smith specular lobe.

    Directions point away from the surface. The specular lobe is zeroed
    where either direction is below the surface; the diffuse term is not.
    """
    w_i, w_o, n = _t(w_i), _t(w_o), _t(normal)
    rho, tau = _t(rgb_albedo), _t(tau)
    h = _safe_normalize(w_i + w_o)
    n_h = _dot(n, h)
    n_i = _dot(n, w_i)
    n_o = _dot(n, w_o)
    o_h = _dot(w_o, h)
    front = (n_i > 0) & (n_o > 0) & (o_h > 0)
    one = torch.ones_like(n_i)
    safe_ni = torch.where(front, n_i, one)
    safe_no = torch.where(front, n_o, one)
    safe_oh = torch.where(front, o_h, one)
    d = ggx_D(torch.clamp(n_h, min=0.0), tau)
    f = fresnel_schlick(torch.clamp(_dot(w_i, h), 0.0, 1.0), f0)
    g = torch.minimum(
        torch.ones_like(n_h),
        torch.minimum(2.0 * n_h * safe_ni / safe_oh, 2.0 * n_h * safe_no / safe_oh),
    )
    spec = torch.where(front, f * d * g / (4.0 * safe_ni * safe_no), torch.zeros_like(n_i))
    return rho / math.pi + spec.unsqueeze(-1)


def sh_basis(directions) -> torch.Tensor:
    """Real SH basis up to l = 3 at unit directions, (..., 16), index l^2 + l + m."""
    dirs = _t(directions)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    basis = [
        torch.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
    return torch.stack(basis, dim=-1)


def eval_sh_sky(sky_sh, direction) -> torch.Tensor:
    """Sky radiance sum_lm c_lm Y_lm(w) per channel; may be negative."""
    return sh_basis(direction) @ _t(sky_sh)


def project_to_sh(directions: np.ndarray, radiance: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Quadrature projection of sampled radiance onto the 16 SH coefficients."""
    basis = sh_basis(directions).numpy()
    return np.einsum("n,nk,nc->kc", np.asarray(weights, dtype=np.float64), basis, np.asarray(radiance, dtype=np.float64))


def ggx_normalization(tau: float, samples: int = 1_000_000, seed: int | None = None) -> float:
    """Hemisphere integral of D(h) (n.h), which is 1 for a normalised GGX lobe.

    With seed=None this is deterministic midpoint quadrature over cos(theta_h).
    With a seed, directions are drawn uniformly over the hemisphere (so cos is
    uniform on [0, 1]) with one jittered sample per stratum, giving a seeded
    Monte Carlo estimate.
    """
    strata = torch.arange(samples, dtype=DTYPE)
    if seed is None:
        offset = torch.full((samples,), 0.5, dtype=DTYPE)
    else:
        offset = torch.rand(samples, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    cos_h = (strata + offset) / samples
    # uniform hemisphere pdf is 1 / (2 pi)
    integrand = 2.0 * math.pi * ggx_D(cos_h, tau) * cos_h
    return float(integrand.mean())


def fs_table(tau: float, cos_values: Sequence[float], f0: float = F0_DEFAULT) -> list[tuple[float, float]]:
    """(cos, f_s) rows for the eval-brdf command."""
    cos_t = _t(list(cos_values))
    values = lidar_specular_fs(cos_t, tau, f0)
    return [(float(c), float(v)) for c, v in zip(cos_t, values)]


def specularity_profile(
    rho_lidar: float,
    tau: float,
    cos_values: Sequence[float],
    distances: Sequence[float],
    f0: float = F0_DEFAULT,
    emitted_power: float = 1.0,
) -> np.ndarray:
    """Intensity over a (cos, distance) grid, shape (len(cos), len(d)).

    A diffuse surface varies only as cos/d^2; a specular one shows a peak
    near normal incidence.
    """
    cos_grid, dist_grid = np.meshgrid(np.asarray(cos_values, dtype=np.float64), np.asarray(distances, dtype=np.float64), indexing="ij")
    values = lidar_intensity(rho_lidar, tau, cos_grid, dist_grid, emitted_power, f0)
    return values.numpy()


def specularity_ratio(rho_lidar: float, tau: float, cos_edge: float = 0.8, f0: float = F0_DEFAULT) -> float:
    """I(cos=1) / I(cos=cos_edge) at fixed range; 1/cos_edge for a Lambertian surface."""
    peak = lidar_intensity(rho_lidar, tau, 1.0, 1.0, 1.0, f0)
    edge = lidar_intensity(rho_lidar, tau, cos_edge, 1.0, 1.0, f0)
    return float(peak / edge)
