"""Image and intensity metrics plus the dataset evaluation report."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
from scipy.ndimage import gaussian_filter

from core.ledger import atomic_rewrite_json
from core.maps_io import read_pfm
from core.validator import DataError, require_file, validate_map_shape
from paths import DatasetLayout, RunLayout

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, gt, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); inf for identical images."""
    a, b = _pair(pred, gt)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _pair(pred, gt)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]

        def blur(img: np.ndarray) -> np.ndarray:
            return gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

        mu_x, mu_y = blur(x), blur(y)
        sigma_x = blur(x * x) - mu_x * mu_x
        sigma_y = blur(y * y) - mu_y * mu_y
        sigma_xy = blur(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def masked_rmse(pred, gt, mask=None) -> float:
    """RMSE over pixels where mask > 0 (all pixels without a mask); 0 for an empty mask."""
    a, b = _pair(pred, gt)
    sq = (a - b) ** 2
    if mask is None:
        return float(np.sqrt(np.mean(sq)))
    m = np.asarray(mask, dtype=np.float64)
    m = np.broadcast_to(m.reshape(m.shape[:2] + (1,) * (sq.ndim - 2)), sq.shape) > 0
    if not np.any(m):
        logger.warning("masked_rmse: mask is empty")
        return 0.0
    return float(np.sqrt(np.mean(sq[m])))


def report_value(value: float) -> float | str:
    """JSON-safe metric value; infinities become "inf"."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _read(path: Path, name: str, reference: np.ndarray | None = None) -> np.ndarray:
    array = read_pfm(require_file(path, name))
    if reference is not None:
        h, w, c = reference.shape
        validate_map_shape(name, array, h, w, c, path)
    return array


def evaluate_frame(run: RunLayout, data: DatasetLayout, idx: int) -> dict[str, Any]:
    gt_color = _read(data.frame_image(idx), "ground-truth frame")
    pred_color = _read(run.render_map(idx, "color"), "rendered frame", gt_color)
    row: dict[str, Any] = {
        "frame": idx,
        "psnr": psnr(pred_color, gt_color),
        "ssim": ssim(pred_color, gt_color),
    }
    gt_intensity_path = data.gt_map(idx, "intensity")
    pred_intensity_path = run.render_map(idx, "intensity")
    if gt_intensity_path.exists() and pred_intensity_path.exists():
        gt_int = _read(gt_intensity_path, "ground-truth intensity")
        pred_int = _read(pred_intensity_path, "rendered intensity", gt_int)
        mask_path = data.gt_map(idx, "mask")
        mask = _read(mask_path, "LiDAR mask", gt_int) if mask_path.exists() else (gt_int > 0).astype(np.float64)
        row["intensity_rmse"] = masked_rmse(pred_int, gt_int, mask)
    for kind, key in (("albedo", "albedo_rmse"), ("lidar_albedo", "lidar_albedo_rmse")):
        gt_path = data.gt_map(idx, kind)
        pred_path = run.render_map(idx, kind)
        if gt_path.exists() and pred_path.exists():
            gt_map = _read(gt_path, f"ground-truth {kind}")
            pred_map = _read(pred_path, f"rendered {kind}", gt_map)
            alpha_path = data.gt_map(idx, "mask") if kind == "lidar_albedo" else None
            mask = _read(alpha_path, "LiDAR mask", gt_map[:, :, :1]) if alpha_path is not None and alpha_path.exists() else None
            row[key] = masked_rmse(pred_map, gt_map, mask)
    return row


def evaluate_dataset(pred_dir: str | Path, gt_dir: str | Path, out_path: str | Path | None = None) -> dict[str, Any]:
    """Per-frame and mean PSNR/SSIM/RMSE of a render directory against a dataset.

    Writes metrics.json (pred_dir/metrics.json unless out_path is given).
    """
    run = RunLayout(Path(pred_dir))
    data = DatasetLayout(Path(gt_dir))
    indices = sorted(
        int(p.stem.split("_")[1])
        for p in run.maps_dir.glob("frame_*_color.pfm")
    ) if run.maps_dir.exists() else []
    if not indices:
        raise DataError(f"missing_file: no rendered frames in {run.maps_dir}")
    rows = [evaluate_frame(run, data, idx) for idx in indices]
    keys = sorted({k for row in rows for k in row if k != "frame"})
    mean = {}
    for key in keys:
        values = [row[key] for row in rows if key in row]
        mean[key] = math.inf if all(math.isinf(v) for v in values) else float(np.mean([v for v in values if not math.isinf(v)]))
    report = {
        "frames": [{k: report_value(v) if isinstance(v, float) else v for k, v in row.items()} for row in rows],
        "mean": {k: report_value(v) for k, v in mean.items()},
    }
    target = Path(out_path) if out_path is not None else run.metrics_report
    atomic_rewrite_json(target, report)
    logger.info("metrics frames=%d out=%s", len(rows), target)
    return report
