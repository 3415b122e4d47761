import json
import math
import shutil

import numpy as np
import pytest

from core.maps_io import read_pfm, write_pfm
from core.metrics import evaluate_dataset, masked_rmse, psnr, report_value, ssim
from core.validator import DataError
from paths import DatasetLayout, RunLayout


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4, 1)))


def test_ssim():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(16, 16, 3))
    assert ssim(image, image) == pytest.approx(1.0)
    assert ssim(image, rng.uniform(size=(16, 16, 3))) < 0.5


def test_masked_rmse():
    pred = np.array([[[1.0], [3.0]]])
    gt = np.zeros((1, 2, 1))
    assert masked_rmse(pred, gt) == pytest.approx(math.sqrt(5.0))
    assert masked_rmse(pred, gt, np.array([[[1.0], [0.0]]])) == pytest.approx(1.0)
    assert masked_rmse(pred, gt, np.zeros((1, 2, 1))) == 0.0


def test_report_value():
    assert report_value(math.inf) == "inf"
    assert report_value(1.5) == 1.5


def _copy_ground_truth(dataset: DatasetLayout, run: RunLayout, frames: int) -> None:
    run.maps_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(frames):
        shutil.copy(dataset.frame_image(idx), run.render_map(idx, "color"))
        for kind in ("intensity", "albedo", "lidar_albedo"):
            shutil.copy(dataset.gt_map(idx, kind), run.render_map(idx, kind))


def test_evaluate_dataset_on_ground_truth(plane_dataset, tmp_path):
    run = RunLayout(tmp_path / "pred")
    _copy_ground_truth(DatasetLayout(plane_dataset), run, 2)
    report = evaluate_dataset(run.root, plane_dataset)
    assert [row["frame"] for row in report["frames"]] == [0, 1]
    assert report["mean"]["psnr"] == "inf"
    assert report["mean"]["ssim"] == pytest.approx(1.0)
    assert report["mean"]["intensity_rmse"] == 0.0
    assert report["mean"]["albedo_rmse"] == 0.0
    assert json.loads(run.metrics_report.read_text()) == report


def test_evaluate_dataset_finite_mean_skips_perfect_frames(plane_dataset, tmp_path):
    data = DatasetLayout(plane_dataset)
    run = RunLayout(tmp_path / "pred")
    _copy_ground_truth(data, run, 2)
    noisy = read_pfm(data.frame_image(1)) + 0.1
    write_pfm(run.render_map(1, "color"), noisy)
    out = tmp_path / "report.json"
    report = evaluate_dataset(run.root, plane_dataset, out)
    assert report["frames"][0]["psnr"] == "inf"
    assert report["mean"]["psnr"] == pytest.approx(20.0)
    assert out.exists()


def test_evaluate_dataset_without_renders(plane_dataset, tmp_path):
    with pytest.raises(DataError, match="no rendered frames"):
        evaluate_dataset(tmp_path / "empty", plane_dataset)


def test_evaluate_dataset_missing_ground_truth(plane_dataset, tmp_path):
    run = RunLayout(tmp_path / "pred")
    run.maps_dir.mkdir(parents=True)
    write_pfm(run.render_map(7, "color"), np.zeros((16, 16, 3)))
    with pytest.raises(DataError, match="missing_file"):
        evaluate_dataset(run.root, plane_dataset)
