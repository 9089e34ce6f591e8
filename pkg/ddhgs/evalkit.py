from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .colorimetry import VISIBLE_RANGE_NM, band_weights, cmf_at, xyz_to_srgb
from .hypercube import HyperCube, as_tensor, atomic_write_bytes
from .losses import ssim_value

logger = logging.getLogger(__name__)

PSNR_INF = math.inf
HEATMAP_MAX_ERROR = 0.2
METRICS_CSV_HEADER = "view,variant,psnr,ssim,sam,rmse"
TIMING_CSV_HEADER = "view,fps"


@dataclass(frozen=True)
class MetricTable:
    psnr: float  # dB, PSNR_INF for an exact match
    ssim: float
    sam: float  # radians
    rmse: float
    fps: float | None = None  # wall-clock, kept out of metrics.csv

    def csv_fields(self) -> list[str]:
        return [_fmt(self.psnr), _fmt(self.ssim), _fmt(self.sam), _fmt(self.rmse)]


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.9g}"


def _pair(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    p = as_tensor(pred).to(torch.float64)
    g = as_tensor(gt).to(torch.float64)
    if p.shape != g.shape:
        raise ValueError(f"Shape mismatch: pred {tuple(p.shape)} vs gt {tuple(g.shape)}")
    return p, g


def psnr(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor, max_value: float = 1.0) -> float:
    p, g = _pair(pred, gt)
    mse = float(((p - g) ** 2).mean())
    if mse == 0:
        return PSNR_INF
    return 10 * math.log10(max_value**2 / mse)


def rmse(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> float:
    p, g = _pair(pred, gt)
    return math.sqrt(float(((p - g) ** 2).mean()))


def sam(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> float:
    """Mean spectral angle in radians over pixels whose reference spectrum is non-zero."""
    p, g = _pair(pred, gt)
    p = p.reshape(-1, p.shape[-1])
    g = g.reshape(-1, g.shape[-1])
    g_norm = g.norm(dim=-1)
    keep = g_norm > 0
    if not bool(keep.any()):
        logger.warning("SAM undefined: every reference spectrum is zero; reporting 0")
        return 0.0
    p, g, g_norm = p[keep], g[keep], g_norm[keep]
    denom = (p.norm(dim=-1) * g_norm).clamp_min(1e-300)
    cos = ((p * g).sum(-1) / denom).clamp(-1.0, 1.0)
    return float(torch.arccos(cos).mean())


def ssim_metric(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> float:
    p, g = _pair(pred, gt)
    return float(ssim_value(p, g))


def compare(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor, fps: float | None = None) -> MetricTable:
    return MetricTable(psnr(pred, gt), ssim_metric(pred, gt), sam(pred, gt), rmse(pred, gt), fps)


def mean_table(tables: list[MetricTable]) -> MetricTable:
    if not tables:
        raise ValueError("Cannot average an empty list of metric tables")

    def avg(values):
        return sum(values) / len(values)

    fps_values = [t.fps for t in tables if t.fps is not None]
    return MetricTable(
        psnr=avg([t.psnr for t in tables]),
        ssim=avg([t.ssim for t in tables]),
        sam=avg([t.sam for t in tables]),
        rmse=avg([t.rmse for t in tables]),
        fps=avg(fps_values) if fps_values else None,
    )


def write_metrics_csv(rows: list[tuple[str, str, MetricTable]], path: Path) -> None:
    lines = [METRICS_CSV_HEADER]
    for view, variant, table in rows:
        lines.append(",".join([view, variant, *table.csv_fields()]))
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())
    logger.info("Wrote %d metric rows to %s", len(rows), path)


def write_timing_csv(rows: list[tuple[str, float]], path: Path) -> None:
    lines = [TIMING_CSV_HEADER, *(f"{view},{fps:.6g}" for view, fps in rows)]
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


# ----------------------------------------------------------------------
# Visualisation
# ----------------------------------------------------------------------


def band_range_for(cube: HyperCube, lo_nm: float, hi_nm: float) -> tuple[int, int]:
    """Half-open band index range whose wavelengths fall in [lo_nm, hi_nm]."""
    inside = torch.nonzero((cube.wavelengths >= lo_nm) & (cube.wavelengths <= hi_nm)).squeeze(1)
    if inside.numel() == 0:
        raise ValueError(f"No bands between {lo_nm} and {hi_nm} nm")
    return int(inside[0]), int(inside[-1]) + 1


def diff_heatmap(
    pred: HyperCube | torch.Tensor,
    gt: HyperCube | torch.Tensor,
    band_range: tuple[int, int],
    path: Path | None = None,
) -> torch.Tensor:
    """Per-pixel mean |pred - gt| over ``band_range``; optionally saved as an 8-bit PNG.

    The PNG maps [0, 0.2] linearly onto [0, 255], rounding half up.
    """
    p, g = _pair(pred, gt)
    start, stop = band_range
    if not 0 <= start < stop <= p.shape[-1]:
        raise ValueError(f"Band range {band_range} is empty or outside 0..{p.shape[-1]}")
    error = (p[..., start:stop] - g[..., start:stop]).abs().mean(-1)
    if path is not None:
        save_png(heatmap_to_uint8(error), path)
    return error


def heatmap_to_uint8(error: torch.Tensor) -> np.ndarray:
    scaled = (error / HEATMAP_MAX_ERROR).clamp(0, 1) * 255
    return torch.floor(scaled + 0.5).to(torch.uint8).numpy()


def spectral_curves(cube: HyperCube, pixels: list[tuple[int, int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (wavelengths, N x P spectra) for the requested (row, col) pixels."""
    if not pixels:
        raise ValueError("No pixels requested")
    for row, col in pixels:
        if not (0 <= row < cube.height and 0 <= col < cube.width):
            raise IndexError(f"Pixel ({row}, {col}) outside {cube.height}x{cube.width} cube")
    spectra = torch.stack([cube.data[row, col] for row, col in pixels], dim=1)
    return cube.wavelengths.clone(), spectra


def write_spectral_curves(cube: HyperCube, pixels: list[tuple[int, int]], path: Path) -> None:
    wavelengths, spectra = spectral_curves(cube, pixels)
    header = ",".join(["wavelength_nm", *(f"r{row}c{col}" for row, col in pixels)])
    lines = [header]
    for i in range(wavelengths.numel()):
        values = [f"{float(wavelengths[i]):g}", *(f"{float(v):.9g}" for v in spectra[i])]
        lines.append(",".join(values))
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def _visible_bands(cube: HyperCube) -> torch.Tensor:
    lo, hi = VISIBLE_RANGE_NM
    visible = (cube.wavelengths >= lo) & (cube.wavelengths <= hi)
    if not bool(visible.any()):
        raise ValueError(
            f"Cube wavelengths {cube.wavelength_range} nm have no bands in the visible range {VISIBLE_RANGE_NM}"
        )
    return visible


def cube_to_xyz(cube: HyperCube) -> torch.Tensor:
    """H x W x 3 tristimulus values, scaled so a flat unit spectrum has Y = 1."""
    _visible_bands(cube)
    weights = band_weights(cube.wavelengths)[:, None] * cmf_at(cube.wavelengths)
    norm = float(weights[:, 1].sum())
    if norm <= 0:
        raise ValueError("Visible bands carry no luminance weight")
    return cube.data.to(torch.float64) @ (weights / norm)


def pseudo_rgb(cube: HyperCube) -> torch.Tensor:
    """sRGB preview in [0, 1] from CIE-weighted bands."""
    return xyz_to_srgb(cube_to_xyz(cube))


def save_png(image: torch.Tensor | np.ndarray, path: Path) -> None:
    if isinstance(image, torch.Tensor):
        image = torch.floor(image.clamp(0, 1) * 255 + 0.5).to(torch.uint8).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    Image.fromarray(image).save(tmp, format="PNG")
    tmp.replace(path)
    logger.debug("Wrote %s", path)
