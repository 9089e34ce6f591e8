"""Central finite-difference oracles for the hand-written adjoints.

Every check runs in float64 on a small randomized instance and reports, per
parameter group, max|analytic - numeric| / max(max|numeric|, 1e-8).
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import make_generator
from .diffusion_denoiser import DenoiserNet, build_denoiser, diffusion_loss, forward_noise, make_schedule
from .gaussian_scene import SH_COEFFS, CameraView, GaussianCloud, random_quaternions
from .losses import spectral_loss, ssim_loss
from .rasterizer import render, render_backward
from .wavelength_encoder import EncoderParams, encoder_backward, offsets_for

logger = logging.getLogger(__name__)

FD_EPS = 1e-3
SAMPLES_PER_LAYER = 2

TOLERANCES = {
    "rasterizer": 1e-3,
    "encoder": 1e-4,
    "spectral": 1e-4,
    "ssim": 1e-3,
    "diffusion": 1e-3,
}


@dataclass(frozen=True)
class CheckResult:
    check: str
    group: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def numeric_gradient(fn: Callable[[], float], tensor: torch.Tensor, eps: float = FD_EPS) -> torch.Tensor:
    """Central differences of ``fn`` with respect to every entry of ``tensor`` (perturbed in place)."""
    return numeric_gradient_at(fn, tensor, range(tensor.numel()), eps).view_as(tensor)


def numeric_gradient_at(
    fn: Callable[[], float], tensor: torch.Tensor, indices, eps: float = FD_EPS
) -> torch.Tensor:
    """Central differences at the given flat indices only."""
    flat = tensor.view(-1)
    indices = list(indices)
    out = torch.zeros(len(indices), dtype=tensor.dtype)
    with torch.no_grad():
        for k, i in enumerate(indices):
            orig = float(flat[i])
            flat[i] = orig + eps
            plus = fn()
            flat[i] = orig - eps
            minus = fn()
            flat[i] = orig
            out[k] = (plus - minus) / (2 * eps)
    return out


def _results(check: str, pairs: dict[str, tuple[torch.Tensor, torch.Tensor]]) -> list[CheckResult]:
    tol = TOLERANCES[check]
    return [CheckResult(check, group, relative_error(a, n), tol) for group, (a, n) in pairs.items()]


def check_rasterizer(seed: int = 0) -> list[CheckResult]:
    """5 Gaussians, 8x8 image, 4 bands, including SH offsets."""
    gen = make_generator(seed, "gradcheck.rasterizer")
    dtype = torch.float64
    count, bands = 5, 4
    cloud = GaussianCloud(
        means=(torch.rand(count, 3, generator=gen, dtype=dtype) - 0.5) * 0.8,
        rotations=random_quaternions(count, gen).to(dtype),
        log_scales=torch.log(0.15 + 0.15 * torch.rand(count, 3, generator=gen, dtype=dtype)),
        opacity_logits=torch.randn(count, generator=gen, dtype=dtype) * 0.5,
        sh=torch.cat(
            [
                1.0 + 0.5 * torch.rand(count, bands, 1, generator=gen, dtype=dtype),
                0.05 * torch.randn(count, bands, SH_COEFFS - 1, generator=gen, dtype=dtype),
            ],
            dim=-1,
        ),
        wavelengths=torch.linspace(450.0, 650.0, bands, dtype=dtype),
    )
    offsets = 0.05 * torch.randn(bands, SH_COEFFS, generator=gen, dtype=dtype)
    cam = CameraView.look_at((0.3, -3.0, 0.4), (0.0, 0.0, 0.0), fx=10.0, fy=10.0, width=8, height=8)
    upstream = torch.randn(8, 8, bands, generator=gen, dtype=dtype)

    grads = render_backward(cloud, cam, offsets, upstream)

    def objective() -> float:
        return float((render(cloud, cam, offsets).cube.data.to(dtype) * upstream).sum())

    pairs = {
        name: (getattr(grads, f"d_{name}"), numeric_gradient(objective, getattr(cloud, name)))
        for name in ("means", "rotations", "log_scales", "opacity_logits", "sh")
    }
    pairs["offsets"] = (grads.d_offsets, numeric_gradient(objective, offsets))
    return _results("rasterizer", pairs)


def check_encoder(seed: int = 0) -> list[CheckResult]:
    """Two hidden layers, 4 bands, non-zero output layer."""
    gen = make_generator(seed, "gradcheck.encoder")
    dtype = torch.float64
    frequencies, hidden = 6, [8, 8]
    widths = [2 * frequencies, *hidden, SH_COEFFS]
    params = EncoderParams(
        frequencies,
        hidden,
        [0.5 * torch.randn(widths[i + 1], widths[i], generator=gen, dtype=dtype) for i in range(len(widths) - 1)],
        [0.1 * torch.randn(widths[i + 1], generator=gen, dtype=dtype) for i in range(len(widths) - 1)],
    )
    wavelengths = torch.tensor([420.0, 530.0, 610.0, 690.0], dtype=dtype)
    wl_range = (400.0, 700.0)
    upstream = torch.randn(4, SH_COEFFS, generator=gen, dtype=dtype)
    grads = encoder_backward(params, wavelengths, wl_range, upstream)

    def objective() -> float:
        return float((offsets_for(params, wavelengths, wl_range) * upstream).sum())

    pairs = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pairs[f"weight{i}"] = (grads.weights[i], numeric_gradient(objective, w))
        pairs[f"bias{i}"] = (grads.biases[i], numeric_gradient(objective, b))
    return _results("encoder", pairs)


def check_spectral(seed: int = 0) -> list[CheckResult]:
    gen = make_generator(seed, "gradcheck.spectral")
    pred = torch.rand(4, 4, 5, generator=gen, dtype=torch.float64)
    gt = torch.rand(4, 4, 5, generator=gen, dtype=torch.float64)
    analytic = spectral_loss(pred, gt, alpha=0.7, beta=1.3).grad
    numeric = numeric_gradient(lambda: float(spectral_loss(pred, gt, alpha=0.7, beta=1.3).value), pred)
    return _results("spectral", {"pred": (analytic, numeric)})


def check_ssim(seed: int = 0) -> list[CheckResult]:
    gen = make_generator(seed, "gradcheck.ssim")
    pred = torch.rand(12, 12, 2, generator=gen, dtype=torch.float64)
    gt = torch.rand(12, 12, 2, generator=gen, dtype=torch.float64)
    analytic = ssim_loss(pred, gt).grad
    numeric = numeric_gradient(lambda: float(ssim_loss(pred, gt).value), pred)
    return _results("ssim", {"pred": (analytic, numeric)})


def _toy_denoiser(bands: int, gen: torch.Generator) -> DenoiserNet:
    net = build_denoiser(bands, width=4, generator=gen).double()
    with torch.no_grad():
        net.out_conv.weight.copy_(0.2 * torch.randn(net.out_conv.weight.shape, generator=gen, dtype=torch.float64))
        net.out_conv.bias.copy_(0.1 * torch.randn(net.out_conv.bias.shape, generator=gen, dtype=torch.float64))
    return net


def check_diffusion(seed: int = 0) -> list[CheckResult]:
    """Conditioning gradient, plus a few sampled weights of every conv and linear layer,
    of the eps-prediction loss at fixed (t, eps)."""
    gen = make_generator(seed, "gradcheck.diffusion")
    bands = 2
    net = _toy_denoiser(bands, gen)
    sched = make_schedule(50)
    t = 25
    gt = torch.rand(8, 8, bands, generator=gen, dtype=torch.float64)
    cond = torch.rand(8, 8, bands, generator=gen, dtype=torch.float64)
    eps = torch.randn(8, 8, bands, generator=gen, dtype=torch.float64)

    net.zero_grad()
    result = diffusion_loss(net, gt, cond, sched, gen, t=t, eps=eps)
    layers = [(name, m) for name, m in net.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    sampled = {}
    for name, layer in layers:
        grad = layer.weight.grad.view(-1)
        # The largest entries set the error scale; random ones cover the rest of the layer.
        top = grad.abs().topk(min(2, grad.numel())).indices.tolist()
        rest = torch.randperm(grad.numel(), generator=gen)[:SAMPLES_PER_LAYER].tolist()
        picks = list(dict.fromkeys(top + rest))
        sampled[name] = (layer.weight, picks, grad[picks].clone())

    def objective() -> float:
        x0 = gt.permute(2, 0, 1)[None]
        noise = eps.permute(2, 0, 1)[None]
        x_t = forward_noise(x0, t, noise, sched)
        pred = net(x_t, torch.tensor([t]), cond.permute(2, 0, 1)[None])
        return float(F.mse_loss(pred, noise))

    pairs = {"cond": (result.grad, numeric_gradient(objective, cond))}
    for name, (weight, picks, analytic) in sampled.items():
        pairs[name] = (analytic, numeric_gradient_at(objective, weight.data, picks))
    return _results("diffusion", pairs)


CHECKS: dict[str, Callable[[int], list[CheckResult]]] = {
    "rasterizer": check_rasterizer,
    "encoder": check_encoder,
    "spectral": check_spectral,
    "ssim": check_ssim,
    "diffusion": check_diffusion,
}


def run_all(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"Unknown gradient checks {unknown}; choose from {list(CHECKS)}")
    results: list[CheckResult] = []
    for name in names:
        start = time.perf_counter()
        found = CHECKS[name](seed)
        worst = max(r.rel_error for r in found)
        logger.info("gradcheck %-10s worst relative error %.3e (%.1fs)", name, worst, time.perf_counter() - start)
        results.extend(found)
    return results
