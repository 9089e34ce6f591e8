from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import SceneSpec, make_generator
from .gaussian_scene import (
    SH_COEFFS,
    CameraView,
    GaussianCloud,
    inverse_sigmoid,
    random_quaternions,
    read_cloud,
    rgb_to_sh_dc,
    write_cloud,
)
from .hypercube import HyperCube, atomic_write_bytes, read_cube, write_cube
from .rasterizer import render

logger = logging.getLogger(__name__)

POSES_NAME = "poses.json"
CLOUD_NAME = "scene.gsc"


def clean_name(view_id: int) -> str:
    return f"view_{view_id:04d}.hsc"


def noisy_name(view_id: int) -> str:
    return f"view_{view_id:04d}_noisy.hsc"


@dataclass
class Dataset:
    root: Path
    view_ids: list[int]
    cameras: list[CameraView]
    wavelengths: torch.Tensor
    bounds: tuple[list[float], list[float]]
    clean: list[HyperCube]
    noisy: list[HyperCube]
    cloud: GaussianCloud | None = None

    def __len__(self) -> int:
        return len(self.view_ids)

    def targets(self, noisy: bool = False) -> list[HyperCube]:
        return self.noisy if noisy else self.clean

    def index_of(self, view_id: int) -> int:
        return self.view_ids.index(view_id)


# ----------------------------------------------------------------------
# Scene construction
# ----------------------------------------------------------------------


def material_spectra(spec: SceneSpec, generator: torch.Generator) -> torch.Tensor:
    """(materials, N) smooth reflectance curves built from 2-4 Gaussian bumps each."""
    wl = spec.wavelengths().to(torch.float64)
    span = spec.wavelength_max - spec.wavelength_min
    curves = []
    for _ in range(spec.materials):
        bumps = int(torch.randint(2, 5, (1,), generator=generator))
        draws = torch.rand(bumps, 3, generator=generator, dtype=torch.float64)
        centers = spec.wavelength_min + draws[:, 0] * span
        widths = (0.08 + 0.22 * draws[:, 1]) * span
        amplitudes = 0.15 + 0.35 * draws[:, 2]
        curve = 0.05 + (amplitudes[:, None] * torch.exp(-0.5 * ((wl[None] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
        curves.append(curve.clamp(max=0.95))
    return torch.stack(curves)


def true_cloud(spec: SceneSpec, generator: torch.Generator) -> GaussianCloud:
    g, r = spec.scene_gaussians, spec.scene_radius
    spectra = material_spectra(spec, generator)
    means = (torch.rand(g, 3, generator=generator, dtype=torch.float64) * 2 - 1) * r
    log_scales = torch.log((0.08 + 0.17 * torch.rand(g, 3, generator=generator, dtype=torch.float64)) * r)
    opacities = 0.5 + 0.45 * torch.rand(g, generator=generator, dtype=torch.float64)
    material = torch.randint(0, spec.materials, (g,), generator=generator)

    sh = torch.zeros(g, spec.bands, SH_COEFFS, dtype=torch.float64)
    sh[:, :, 0] = rgb_to_sh_dc(spectra[material])
    sh[:, :, 1:4] = 0.01 * torch.randn(g, spec.bands, 3, generator=generator, dtype=torch.float64)
    return GaussianCloud(
        means=means.float(),
        rotations=random_quaternions(g, generator),
        log_scales=log_scales.float(),
        opacity_logits=inverse_sigmoid(opacities).float(),
        sh=sh.float(),
        wavelengths=spec.wavelengths(),
    )


def orbit_cameras(spec: SceneSpec) -> list[CameraView]:
    elevation = math.radians(spec.orbit_elevation_deg)
    cameras = []
    for v in range(spec.views):
        azimuth = 2 * math.pi * v / spec.views
        # Alternate two rings so the orbit does not see the scene from one height only.
        elev = elevation if v % 2 == 0 else 0.5 * elevation
        eye = (
            spec.orbit_radius * math.cos(elev) * math.cos(azimuth),
            spec.orbit_radius * math.cos(elev) * math.sin(azimuth),
            spec.orbit_radius * math.sin(elev),
        )
        cameras.append(
            CameraView.look_at(
                eye, (0.0, 0.0, 0.0), fx=spec.focal, fy=spec.focal, width=spec.width, height=spec.height
            )
        )
    return cameras


def band_noise_std(spec: SceneSpec) -> torch.Tensor:
    """Per-band std, rising quadratically from ``noise_std`` at the centre band to
    ``noise_std * noise_edge_boost`` at the outermost bands."""
    pos = torch.linspace(-1.0, 1.0, spec.bands, dtype=torch.float64)
    return spec.noise_std * (1 + (spec.noise_edge_boost - 1) * pos * pos)


def noise_field(spec: SceneSpec, generator: torch.Generator) -> torch.Tensor:
    """Zero-mean band-dependent Gaussian noise for one H x W x N view."""
    eps = torch.randn(spec.height, spec.width, spec.bands, generator=generator, dtype=torch.float64)
    return eps * band_noise_std(spec)


def noisy_view(cube: HyperCube, spec: SceneSpec, generator: torch.Generator) -> HyperCube:
    """Add one draw of band noise, truncated per pixel to [-clean, +clean].

    The truncation is symmetric, so the noisy cube stays non-negative and its
    expectation is still the clean cube, including on dark pixels.
    """
    noise = noise_field(spec, generator).to(cube.data.dtype)
    noise = torch.clamp(noise, -cube.data, cube.data)
    return cube.with_data(cube.data + noise)


def generate(spec: SceneSpec, out_dir: Path, seed: int = 0) -> Dataset:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_gen = make_generator(seed, "synthgen.scene")
    noise_gen = make_generator(seed, "synthgen.noise")
    gain_gen = make_generator(seed, "synthgen.gain")

    cloud = true_cloud(spec, scene_gen)
    cameras = orbit_cameras(spec)
    offsets = torch.zeros(spec.bands, SH_COEFFS, dtype=torch.float32)

    clean, noisy = [], []
    for view_id, cam in enumerate(cameras):
        cube = render(cloud, cam, offsets).cube
        if spec.gain_jitter > 0:
            gain = 1 + spec.gain_jitter * float(torch.randn(1, generator=gain_gen))
            cube = cube.with_data(torch.clamp_min(cube.data * gain, 0.0))
        noisy_cube = noisy_view(cube, spec, noise_gen)
        write_cube(cube, out_dir / clean_name(view_id))
        write_cube(noisy_cube, out_dir / noisy_name(view_id))
        clean.append(cube)
        noisy.append(noisy_cube)
        logger.debug("Rendered synthetic view %d/%d", view_id + 1, spec.views)

    r = spec.scene_radius
    bounds = ([-r, -r, -r], [r, r, r])
    write_cloud(cloud, out_dir / CLOUD_NAME)
    write_poses(out_dir / POSES_NAME, cameras, cloud.wavelengths, bounds)
    logger.info(
        "Wrote synthetic dataset to %s: %d views, %d Gaussians, %d bands",
        out_dir, spec.views, len(cloud), spec.bands,
    )
    return Dataset(out_dir, list(range(spec.views)), cameras, cloud.wavelengths, bounds, clean, noisy, cloud)


# ----------------------------------------------------------------------
# Pose file
# ----------------------------------------------------------------------


def camera_to_json(view_id: int, cam: CameraView) -> dict:
    return {
        "id": view_id,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(-1)],
    }


def camera_from_json(entry: dict) -> CameraView:
    try:
        w2c = torch.tensor(entry["world_to_camera"], dtype=torch.float64)
        if w2c.numel() != 12:
            raise ValueError(f"world_to_camera needs 12 floats, got {w2c.numel()}")
        return CameraView(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            world_to_camera=w2c.reshape(3, 4),
            width=int(entry["width"]),
            height=int(entry["height"]),
        )
    except KeyError as e:
        raise ValueError(f"Pose entry missing field {e}") from None


def write_poses(path: Path, cameras: list[CameraView], wavelengths: torch.Tensor, bounds) -> None:
    """Write the pose file: ``{"views": [...], "wavelengths": [...], "bounds": [lo, hi]}``.

    ``views`` holds one entry per camera (see camera_to_json). The other two keys
    carry dataset metadata; readers also accept a bare list of view entries.
    """
    doc = {
        "views": [camera_to_json(i, cam) for i, cam in enumerate(cameras)],
        "wavelengths": [float(w) for w in wavelengths],
        "bounds": [list(bounds[0]), list(bounds[1])],
    }
    atomic_write_bytes(Path(path), json.dumps(doc, indent=2).encode())


def read_poses(path: Path) -> tuple[list[int], list[CameraView], dict]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        doc = {"views": doc}
    views = doc.get("views")
    if not views:
        raise ValueError(f"No views listed in {path}")
    ids = [int(v["id"]) for v in views]
    return ids, [camera_from_json(v) for v in views], doc


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    poses = root / POSES_NAME
    if not poses.exists():
        raise FileNotFoundError(f"Pose file not found: {poses}")
    ids, cameras, doc = read_poses(poses)
    clean = [read_cube(root / clean_name(i)) for i in ids]
    noisy = [read_cube(root / noisy_name(i)) if (root / noisy_name(i)).exists() else c for i, c in zip(ids, clean)]
    for cube, cam in zip(clean, cameras):
        if (cube.height, cube.width) != (cam.height, cam.width):
            raise ValueError(f"Cube {cube.height}x{cube.width} does not match its pose {cam.height}x{cam.width}")
    wavelengths = torch.tensor(doc.get("wavelengths") or clean[0].wavelengths.tolist(), dtype=torch.float32)
    bounds_raw = doc.get("bounds") or [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
    cloud_path = root / CLOUD_NAME
    cloud = read_cloud(cloud_path) if cloud_path.exists() else None
    logger.info("Loaded %d views from %s", len(ids), root)
    return Dataset(root, ids, cameras, wavelengths, (bounds_raw[0], bounds_raw[1]), clean, noisy, cloud)


# ----------------------------------------------------------------------
# Train/test split
# ----------------------------------------------------------------------


def split(view_ids: list[int], train_fraction: float = 0.9, seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded shuffle, then n_train = round-half-up(fraction * n) with at least one test view."""
    n = len(view_ids)
    if n < 2:
        raise ValueError(f"Need at least 2 views to split, got {n}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = min(int(math.floor(train_fraction * n + 0.5)), n - 1)
    n_train = max(n_train, 1)
    perm = torch.randperm(n, generator=make_generator(seed, "synthgen.split")).tolist()
    shuffled = [view_ids[i] for i in perm]
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])
