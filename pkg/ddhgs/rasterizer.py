from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from .config import worker_threads
from .gaussian_scene import (
    COLOR_SHIFT,
    CameraView,
    GaussianCloud,
    covariance3d,
    covariance3d_backward,
    project_covariance,
    project_points,
    projection_jacobian,
    sh_basis,
    sh_basis_jacobian,
    to_camera,
)
from .hypercube import HyperCube

logger = logging.getLogger(__name__)

ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
TILE_SIZE = 16


@dataclass
class RenderedView:
    cube: HyperCube
    means2d: torch.Tensor  # (G, 2) pixel coordinates
    radii: torch.Tensor  # (G,) 3-sigma screen radius, 0 when culled
    visible: torch.Tensor  # (G,) bool
    per_gaussian_screen_grad: torch.Tensor = field(default=None)  # (G,), set by accumulate_screen_gradients

    def __post_init__(self) -> None:
        if self.per_gaussian_screen_grad is None:
            self.per_gaussian_screen_grad = torch.zeros_like(self.radii, dtype=self.means2d.dtype)


@dataclass
class RenderGradients:
    d_means: torch.Tensor
    d_rotations: torch.Tensor
    d_log_scales: torch.Tensor
    d_opacity_logits: torch.Tensor
    d_sh: torch.Tensor
    d_offsets: torch.Tensor
    d_means2d: torch.Tensor  # pixel units, densification statistic input


@dataclass
class DensifyStats:
    """Running screen-gradient statistics consumed by densify_and_prune."""

    grad_accum: torch.Tensor
    denom: torch.Tensor

    @classmethod
    def zeros(cls, count: int, dtype: torch.dtype = torch.float32) -> DensifyStats:
        return cls(grad_accum=torch.zeros(count, dtype=dtype), denom=torch.zeros(count, dtype=dtype))

    def mean_grad(self) -> torch.Tensor:
        return torch.where(self.denom > 0, self.grad_accum / self.denom.clamp_min(1), torch.zeros_like(self.grad_accum))


@dataclass
class _Projection:
    mean_cam: torch.Tensor
    means2d: torch.Tensor
    sigma: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor  # (G, 3): a, b, c of [[a, b], [b, c]]
    valid: torch.Tensor
    order: torch.Tensor  # indices of valid Gaussians, front to back
    dirs: torch.Tensor
    basis: torch.Tensor
    coeffs: torch.Tensor
    raw_colors: torch.Tensor
    colors: torch.Tensor
    opacities: torch.Tensor


def _project(cloud: GaussianCloud, cam: CameraView, offsets: torch.Tensor | None) -> _Projection:
    mean_cam = to_camera(cloud.means, cam)
    sigma = covariance3d(cloud.rotations, cloud.log_scales)
    cov2d, valid = project_covariance(sigma, mean_cam, cam)
    safe_cam = torch.where(valid[:, None], mean_cam, torch.ones_like(mean_cam))
    means2d = project_points(safe_cam, cam)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)

    idx = torch.nonzero(valid).squeeze(1)
    _, perm = torch.sort(mean_cam[idx, 2], stable=True)
    order = idx[perm]

    offset = cloud.means - cam.center.to(cloud.means.dtype)
    dirs = offset / offset.norm(dim=-1, keepdim=True)
    basis = sh_basis(dirs)
    coeffs = cloud.sh if offsets is None else cloud.sh + offsets
    raw_colors = (coeffs * basis[:, None, :]).sum(-1) + COLOR_SHIFT
    return _Projection(
        mean_cam=mean_cam,
        means2d=means2d,
        sigma=sigma,
        cov2d=cov2d,
        conic=conic,
        valid=valid,
        order=order,
        dirs=dirs,
        basis=basis,
        coeffs=coeffs,
        raw_colors=raw_colors,
        colors=torch.clamp_min(raw_colors, 0.0),
        opacities=torch.sigmoid(cloud.opacity_logits),
    )


def _tiles(height: int, width: int) -> list[tuple[int, int, int, int]]:
    return [
        (r0, min(r0 + TILE_SIZE, height), c0, min(c0 + TILE_SIZE, width))
        for r0 in range(0, height, TILE_SIZE)
        for c0 in range(0, width, TILE_SIZE)
    ]


def _pixel_grid(tile: tuple[int, int, int, int], dtype: torch.dtype) -> torch.Tensor:
    r0, r1, c0, c1 = tile
    rows = torch.arange(r0, r1, dtype=dtype)
    cols = torch.arange(c0, c1, dtype=dtype)
    vv, uu = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([uu.reshape(-1), vv.reshape(-1)], -1)


def _map_tiles(fn, tiles):
    workers = worker_threads()
    if workers <= 1 or len(tiles) == 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tiles))


@dataclass
class _BlendState:
    dx: torch.Tensor
    dy: torch.Tensor
    gauss: torch.Tensor
    raw_alpha: torch.Tensor
    alpha: torch.Tensor
    t_excl: torch.Tensor
    keep: torch.Tensor
    weights: torch.Tensor


def _blend(pixels: torch.Tensor, mu: torch.Tensor, conic: torch.Tensor, opac: torch.Tensor) -> _BlendState:
    dx = pixels[:, None, 0] - mu[None, :, 0]
    dy = pixels[:, None, 1] - mu[None, :, 1]
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = torch.exp(power)
    raw_alpha = opac[None, :] * gauss
    alpha = torch.clamp_max(raw_alpha, ALPHA_MAX)
    t_incl = torch.cumprod(1 - alpha, dim=1)
    t_excl = torch.cat([torch.ones_like(t_incl[:, :1]), t_incl[:, :-1]], dim=1)
    keep = t_incl >= TRANSMITTANCE_MIN
    weights = torch.where(keep, alpha * t_excl, torch.zeros_like(alpha))
    return _BlendState(dx, dy, gauss, raw_alpha, alpha, t_excl, keep, weights)


def _screen_radii(proj: _Projection) -> torch.Tensor:
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + torch.sqrt(torch.clamp_min(mid * mid - (a * c - b * b), 0.1))
    radii = torch.ceil(3 * torch.sqrt(lam))
    return torch.where(proj.valid, radii, torch.zeros_like(radii))


def render(cloud: GaussianCloud, cam: CameraView, offsets: torch.Tensor | None = None) -> RenderedView:
    """Alpha-blend the cloud front to back into an H x W x N cube (background 0)."""
    if len(cloud) == 0:
        raise ValueError("Cannot render an empty GaussianCloud")
    proj = _project(cloud, cam, offsets)
    dtype = cloud.means.dtype
    image = torch.zeros(cam.height, cam.width, cloud.bands, dtype=dtype)

    radii = _screen_radii(proj)
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    visible = (
        proj.valid
        & (u + radii >= 0) & (u - radii <= cam.width - 1)
        & (v + radii >= 0) & (v - radii <= cam.height - 1)
    )

    order = proj.order
    if order.numel() == 0:
        logger.debug("All %d Gaussians culled; returning background", len(cloud))
    else:
        mu, conic = proj.means2d[order], proj.conic[order]
        opac, colors = proj.opacities[order], proj.colors[order]

        def run(tile):
            state = _blend(_pixel_grid(tile, dtype), mu, conic, opac)
            return state.weights @ colors

        for tile, block in zip(_tiles(cam.height, cam.width), _map_tiles(run, _tiles(cam.height, cam.width))):
            r0, r1, c0, c1 = tile
            image[r0:r1, c0:c1] = block.reshape(r1 - r0, c1 - c0, -1)

    return RenderedView(
        cube=HyperCube.from_tensor(image, cloud.wavelengths),
        means2d=proj.means2d,
        radii=radii,
        visible=visible,
    )


def render_backward(
    cloud: GaussianCloud,
    cam: CameraView,
    offsets: torch.Tensor | None,
    d_cube: torch.Tensor,
) -> RenderGradients:
    """Exact adjoint of ``render``; blending state is recomputed per tile."""
    expected = (cam.height, cam.width, cloud.bands)
    if tuple(d_cube.shape) != expected:
        raise ValueError(f"Upstream gradient shape {tuple(d_cube.shape)} does not match render {expected}")

    proj = _project(cloud, cam, offsets)
    dtype = cloud.means.dtype
    g_count, bands = len(cloud), cloud.bands
    order = proj.order
    k = order.numel()

    d_colors_s = torch.zeros(k, bands, dtype=dtype)
    d_opac_s = torch.zeros(k, dtype=dtype)
    d_mu_s = torch.zeros(k, 2, dtype=dtype)
    d_conic_s = torch.zeros(k, 3, dtype=dtype)

    if k > 0:
        mu, conic = proj.means2d[order], proj.conic[order]
        opac, colors = proj.opacities[order], proj.colors[order]
        a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]

        def run(tile):
            r0, r1, c0, c1 = tile
            st = _blend(_pixel_grid(tile, dtype), mu, conic, opac)
            g = d_cube[r0:r1, c0:c1].reshape(-1, bands).to(dtype)
            d_colors = st.weights.T @ g
            gc = g @ colors.T
            wgc = st.weights * gc
            suffix = torch.flip(torch.cumsum(torch.flip(wgc, [1]), 1), [1]) - wgc
            d_alpha = torch.where(st.keep, st.t_excl * gc - suffix / (1 - st.alpha), torch.zeros_like(gc))
            d_raw = torch.where(st.raw_alpha > ALPHA_MAX, torch.zeros_like(d_alpha), d_alpha)
            d_opac = (d_raw * st.gauss).sum(0)
            d_power = d_raw * st.raw_alpha
            dx, dy = st.dx, st.dy
            d_mu = torch.stack(
                [(d_power * (a * dx + b * dy)).sum(0), (d_power * (b * dx + c * dy)).sum(0)], -1
            )
            d_conic = torch.stack(
                [
                    (d_power * (-0.5 * dx * dx)).sum(0),
                    (d_power * (-dx * dy)).sum(0),
                    (d_power * (-0.5 * dy * dy)).sum(0),
                ],
                -1,
            )
            return d_colors, d_opac, d_mu, d_conic

        # Partial buffers are merged in tile order so results are run-to-run identical.
        for d_colors, d_opac, d_mu, d_conic in _map_tiles(run, _tiles(cam.height, cam.width)):
            d_colors_s += d_colors
            d_opac_s += d_opac
            d_mu_s += d_mu
            d_conic_s += d_conic

    def scatter(values: torch.Tensor) -> torch.Tensor:
        out = torch.zeros((g_count,) + tuple(values.shape[1:]), dtype=dtype)
        out[order] = values
        return out

    d_colors = scatter(d_colors_s)
    d_opac = scatter(d_opac_s)
    d_mu = scatter(d_mu_s)
    d_conic = scatter(d_conic_s)

    # Conic -> screen covariance.
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic_m = torch.stack([torch.stack([a, b], -1), torch.stack([b, c], -1)], -2)
    g_conic = torch.stack(
        [
            torch.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
            torch.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1),
        ],
        -2,
    )
    d_cov2d = -conic_m @ g_conic @ conic_m

    # Screen covariance -> 3D covariance and projection Jacobian.
    rot_w = cam.rotation.to(dtype)
    safe_cam = torch.where(proj.valid[:, None], proj.mean_cam, torch.ones_like(proj.mean_cam))
    jac = projection_jacobian(safe_cam, cam)
    t = jac @ rot_w
    d_sigma = t.transpose(-1, -2) @ d_cov2d @ t
    d_jac = 2 * d_cov2d @ t @ proj.sigma @ rot_w.T

    x, y, z = safe_cam.unbind(-1)
    fx, fy = cam.fx, cam.fy
    z2, z3 = z * z, z * z * z
    du, dv = d_mu[:, 0], d_mu[:, 1]
    d_cx = d_jac[:, 0, 2] * (-fx / z2) + du * fx / z
    d_cy = d_jac[:, 1, 2] * (-fy / z2) + dv * fy / z
    d_cz = (
        d_jac[:, 0, 0] * (-fx / z2)
        + d_jac[:, 0, 2] * (2 * fx * x / z3)
        + d_jac[:, 1, 1] * (-fy / z2)
        + d_jac[:, 1, 2] * (2 * fy * y / z3)
        - du * fx * x / z2
        - dv * fy * y / z2
    )
    d_cam = torch.stack([d_cx, d_cy, d_cz], -1)
    d_cam = torch.where(proj.valid[:, None], d_cam, torch.zeros_like(d_cam))
    d_means = d_cam @ rot_w

    d_rotations, d_log_scales = covariance3d_backward(cloud.rotations, cloud.log_scales, d_sigma)

    # Radiance: clamp, SH coefficients, shared offsets, view direction.
    d_raw_colors = torch.where(proj.raw_colors > 0, d_colors, torch.zeros_like(d_colors))
    d_sh = d_raw_colors[:, :, None] * proj.basis[:, None, :]
    d_offsets = d_sh.sum(0)
    d_basis = (d_raw_colors[:, :, None] * proj.coeffs).sum(1)
    d_dir = (d_basis[:, :, None] * sh_basis_jacobian(proj.dirs)).sum(1)
    length = (cloud.means - cam.center.to(dtype)).norm(dim=-1, keepdim=True)
    dirs = proj.dirs
    d_means = d_means + (d_dir - dirs * (dirs * d_dir).sum(-1, keepdim=True)) / length

    sig = proj.opacities
    return RenderGradients(
        d_means=d_means,
        d_rotations=d_rotations,
        d_log_scales=d_log_scales,
        d_opacity_logits=d_opac * sig * (1 - sig),
        d_sh=d_sh,
        d_offsets=d_offsets,
        d_means2d=d_mu,
    )


def accumulate_screen_gradients(
    view: RenderedView,
    grads: RenderGradients,
    stats: DensifyStats | None = None,
) -> DensifyStats:
    """Add this view's screen-space gradient norms to the running densify statistics.

    Norms are taken in NDC units (pixel gradient times W/2, H/2) to match the
    2e-4 threshold convention. Invisible Gaussians are left untouched.
    """
    count = view.visible.shape[0]
    if stats is None:
        stats = DensifyStats.zeros(count, dtype=grads.d_means2d.dtype)
    if grads.d_means2d.shape[0] != count or stats.grad_accum.shape[0] != count:
        raise ValueError("Screen-gradient statistics do not match the rendered cloud")
    height, width = view.cube.height, view.cube.width
    scale = torch.tensor([0.5 * width, 0.5 * height], dtype=grads.d_means2d.dtype)
    norms = (grads.d_means2d * scale).norm(dim=-1)
    view.per_gaussian_screen_grad = torch.where(view.visible, norms, torch.zeros_like(norms))
    stats.grad_accum += view.per_gaussian_screen_grad.to(stats.grad_accum.dtype)
    stats.denom += view.visible.to(stats.denom.dtype)
    return stats
