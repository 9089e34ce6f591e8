import logging
import math

import numpy as np
import pytest
import torch
from PIL import Image

from ddhgs.evalkit import (
    METRICS_CSV_HEADER,
    MetricTable,
    band_range_for,
    compare,
    cube_to_xyz,
    diff_heatmap,
    heatmap_to_uint8,
    mean_table,
    pseudo_rgb,
    psnr,
    rmse,
    sam,
    spectral_curves,
    ssim_metric,
    write_metrics_csv,
    write_spectral_curves,
    write_timing_csv,
)
from ddhgs.hypercube import HyperCube
from ddhgs.losses import ssim_loss

from conftest import make_cube


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_psnr_identical_is_infinite():
    cube = rand(4, 4, 3)
    assert psnr(cube, cube) == math.inf


def test_psnr_uniform_offset():
    gt = rand(4, 4, 3) * 0.5
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_reference():
    for seed in range(10):
        pred, gt = rand(5, 5, 4, seed=seed), rand(5, 5, 4, seed=seed + 100)
        mse = float(((pred - gt) ** 2).sum()) / pred.numel()
        assert psnr(pred, gt) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)


def test_psnr_decreases_with_rmse():
    gt = rand(4, 4, 3)
    assert psnr(gt + 0.05, gt) > psnr(gt + 0.1, gt)


def test_sam_scaled_prediction_is_zero():
    gt = rand(4, 4, 5) + 0.1
    assert sam(3.0 * gt, gt) == pytest.approx(0.0, abs=1e-7)


def test_sam_orthogonal_is_right_angle():
    pred = torch.tensor([1.0, 0.0], dtype=torch.float64).expand(3, 3, 2)
    gt = torch.tensor([0.0, 1.0], dtype=torch.float64).expand(3, 3, 2)
    assert sam(pred, gt) == pytest.approx(math.pi / 2)


def test_sam_matches_brute_force():
    pred, gt = rand(8, 8, 5, seed=1), rand(8, 8, 5, seed=2)
    angles = []
    for r in range(8):
        for c in range(8):
            p, g = pred[r, c], gt[r, c]
            cos = float(p @ g) / (float(p.norm()) * float(g.norm()))
            angles.append(math.acos(max(-1.0, min(1.0, cos))))
    assert sam(pred, gt) == pytest.approx(sum(angles) / len(angles), abs=1e-9)


def test_sam_per_pixel_scale_invariant():
    pred, gt = rand(4, 4, 3, seed=3), rand(4, 4, 3, seed=4)
    scale = rand(4, 4, 1, seed=5) + 0.5
    assert sam(pred * scale, gt) == pytest.approx(sam(pred, gt), abs=1e-9)


def test_sam_skips_zero_reference_pixels(caplog):
    gt = rand(2, 2, 3) + 0.1
    gt[0, 0] = 0
    pred = gt * 2
    pred[0, 0] = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    assert sam(pred, gt) == pytest.approx(0.0, abs=1e-7)
    with caplog.at_level(logging.WARNING):
        assert sam(pred, torch.zeros_like(gt)) == 0.0
    assert "SAM undefined" in caplog.text


def test_rmse_cases():
    gt = rand(4, 4, 3)
    assert rmse(gt, gt) == 0.0
    assert rmse(gt + 0.1, gt) == pytest.approx(0.1)
    pred = rand(4, 4, 3, seed=9)
    assert rmse(pred, gt) ** 2 * gt.numel() == pytest.approx(float(((pred - gt) ** 2).sum()), abs=1e-9)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(rand(2, 2, 3), rand(2, 2, 4))


def test_ssim_metric_agrees_with_loss():
    pred, gt = rand(16, 16, 3, seed=1), rand(16, 16, 3, seed=2)
    assert ssim_metric(pred, gt) == pytest.approx(1 - float(ssim_loss(pred, gt).value), abs=1e-9)
    assert ssim_metric(gt, gt) == pytest.approx(1.0)


def test_compare_and_invariant_between_rmse_and_psnr():
    cube = make_cube(12, 12, 3)
    table = compare(cube, cube, fps=5.0)
    assert table.rmse == 0.0 and table.psnr == math.inf and table.fps == 5.0


def test_mean_table():
    a = MetricTable(30.0, 0.9, 0.1, 0.02, fps=10.0)
    b = MetricTable(20.0, 0.7, 0.3, 0.04)
    mean = mean_table([a, b])
    assert (mean.psnr, mean.ssim, mean.sam, mean.rmse, mean.fps) == pytest.approx((25.0, 0.8, 0.2, 0.03, 10.0))
    with pytest.raises(ValueError):
        mean_table([])


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv([("0001", "raw", MetricTable(math.inf, 1.0, 0.0, 0.0, fps=3.0))], path)
    lines = path.read_text().splitlines()
    assert lines[0] == METRICS_CSV_HEADER
    assert lines[1] == "0001,raw,inf,1,0,0"


def test_timing_csv(tmp_path):
    path = tmp_path / "timing.csv"
    write_timing_csv([("0001", 12.5)], path)
    assert path.read_text().splitlines() == ["view,fps", "0001,12.5"]


# heatmaps


def test_heatmap_identical_is_zero():
    cube = rand(5, 6, 3)
    error = diff_heatmap(cube, cube, (0, 3))
    assert torch.count_nonzero(error) == 0
    assert heatmap_to_uint8(error).max() == 0


def test_heatmap_single_pixel_saturates(tmp_path):
    gt = torch.zeros(4, 4, 2, dtype=torch.float64)
    pred = gt.clone()
    pred[1, 2] = 0.2
    path = tmp_path / "heat.png"
    diff_heatmap(pred, gt, (0, 2), path)
    image = np.asarray(Image.open(path))
    assert image.dtype == np.uint8
    assert image[1, 2] == 255
    assert int(image.sum()) == 255


def test_heatmap_rounds_half_up():
    assert heatmap_to_uint8(torch.tensor([[0.1]], dtype=torch.float64))[0, 0] == 128


def test_heatmap_band_subset():
    gt = torch.zeros(2, 2, 4, dtype=torch.float64)
    pred = gt.clone()
    pred[..., 3] = 0.4
    assert torch.count_nonzero(diff_heatmap(pred, gt, (0, 3))) == 0
    assert torch.allclose(diff_heatmap(pred, gt, (2, 4)), torch.full((2, 2), 0.2, dtype=torch.float64))


@pytest.mark.parametrize("band_range", [(2, 2), (3, 1), (0, 5)])
def test_heatmap_invalid_range(band_range):
    with pytest.raises(ValueError):
        diff_heatmap(rand(2, 2, 4), rand(2, 2, 4), band_range)


def test_band_range_for():
    cube = make_cube(2, 2, 7)  # 400..700 every 50 nm
    assert band_range_for(cube, 450, 600) == (1, 5)
    with pytest.raises(ValueError):
        band_range_for(cube, 710, 800)


# spectral curves


def test_spectral_curves(tmp_path):
    cube = make_cube(3, 3, 4)
    wavelengths, spectra = spectral_curves(cube, [(0, 0), (2, 1)])
    assert spectra.shape == (4, 2)
    assert torch.equal(spectra[:, 1], cube.data[2, 1])
    assert torch.equal(wavelengths, cube.wavelengths)
    path = tmp_path / "curves.csv"
    write_spectral_curves(cube, [(0, 0)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "wavelength_nm,r0c0"
    assert len(lines) == 5
    with pytest.raises(IndexError):
        spectral_curves(cube, [(3, 0)])


# pseudo-RGB


def narrow_cube(center_nm, bands=31):
    wl = torch.linspace(400, 700, bands)
    data = torch.exp(-0.5 * ((wl - center_nm) / 10) ** 2).expand(2, 2, bands).contiguous()
    return HyperCube.from_tensor(data, wl)


def test_pseudo_rgb_green_at_550():
    rgb = pseudo_rgb(narrow_cube(550.0))
    r, g, b = rgb[0, 0].tolist()
    assert g > r and g > b


def test_pseudo_rgb_black_for_zero_cube():
    cube = HyperCube.from_tensor(torch.zeros(2, 3, 5), torch.linspace(400, 700, 5))
    assert torch.count_nonzero(pseudo_rgb(cube)) == 0


def test_xyz_linear_in_radiance():
    cube = narrow_cube(600.0)
    doubled = cube.with_data(cube.data * 2)
    assert torch.allclose(cube_to_xyz(doubled), 2 * cube_to_xyz(cube))


def test_pseudo_rgb_rejects_invisible_cube():
    cube = HyperCube.from_tensor(torch.rand(2, 2, 3), torch.tensor([800.0, 900.0, 1000.0]))
    with pytest.raises(ValueError, match="visible"):
        pseudo_rgb(cube)
