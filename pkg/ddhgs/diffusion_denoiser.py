from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .hypercube import HyperCube, as_tensor

logger = logging.getLogger(__name__)

TIME_EMBED_DIM = 64
NORM_GROUPS = 4


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    betas: torch.Tensor  # float64, index t-1 for t in 1..T
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step t; step 0 is the clean signal."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"Timestep {t} outside 1..{self.steps}")


def make_schedule(steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ValueError(f"Schedule needs at least one step, got {steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alphas = 1 - betas
    return NoiseSchedule(steps, betas, alphas, torch.cumprod(alphas, 0))


def forward_noise(
    x0: HyperCube | torch.Tensor,
    t: int,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Returned as a tensor: noisy cubes go negative."""
    x0 = as_tensor(x0)
    if x0.shape != eps.shape:
        raise ValueError(f"Noise shape {tuple(eps.shape)} does not match {tuple(x0.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps.to(x0.dtype)


# ----------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int = TIME_EMBED_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(NORM_GROUPS, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(NORM_GROUPS, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DenoiserNet(nn.Module):
    """Conditional epsilon predictor: (x_t, t, render) -> eps.

    Input is the noisy cube stacked with the conditioning render (2N
    channels), output is N channels. Spatial sizes are replicate-padded to a
    multiple of the total downsampling factor and cropped back.
    """

    def __init__(self, bands: int, width: int = 32, levels: int = 3):
        super().__init__()
        if width % NORM_GROUPS:
            raise ValueError(f"width must be a multiple of {NORM_GROUPS}, got {width}")
        self.bands = bands
        self.levels = levels
        self.time_mlp = nn.Sequential(
            nn.Linear(TIME_EMBED_DIM, width * 2),
            nn.SiLU(),
            nn.Linear(width * 2, width * 2),
        )
        time_dim = width * 2
        self.in_conv = nn.Conv2d(2 * bands, width, 3, padding=1)
        self.down_blocks = nn.ModuleList([ResBlock(width, width, time_dim) for _ in range(levels)])
        self.downsamples = nn.ModuleList(
            [nn.Conv2d(width, width, 3, stride=2, padding=1) for _ in range(levels - 1)]
        )
        self.mid = ResBlock(width, width, time_dim)
        self.upsamples = nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in range(levels - 1)])
        self.up_blocks = nn.ModuleList([ResBlock(2 * width, width, time_dim) for _ in range(levels)])
        self.out_norm = nn.GroupNorm(NORM_GROUPS, width)
        self.out_conv = nn.Conv2d(width, bands, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def cond_weights(self) -> torch.Tensor:
        """Input-conv weights that read the conditioning render."""
        return self.in_conv.weight[:, self.bands:]

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        height, width = x_t.shape[-2:]
        factor = 2 ** (self.levels - 1)
        pad_h, pad_w = (-height) % factor, (-width) % factor
        h = torch.cat([x_t, cond], dim=1)
        if pad_h or pad_w:
            h = F.pad(h, (0, pad_w, 0, pad_h), mode="replicate")

        temb = self.time_mlp(timestep_embedding(t).to(h.dtype))
        h = self.in_conv(h)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsamples[i](h)
        h = self.mid(h, temb)
        for i in reversed(range(self.levels)):
            if i < self.levels - 1:
                h = self.upsamples[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.up_blocks[i](torch.cat([h, skips[i]], dim=1), temb)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[..., :height, :width]


def build_denoiser(bands: int, width: int, generator: torch.Generator) -> DenoiserNet:
    """Construct a DenoiserNet whose initial weights depend only on ``generator``."""
    fork = torch.random.fork_rng(devices=[])
    with fork:
        torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=generator)))
        net = DenoiserNet(bands, width=width)
    return net


def _to_batch(x: HyperCube | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return as_tensor(x).to(dtype).permute(2, 0, 1).unsqueeze(0)


def _from_batch(x: torch.Tensor) -> torch.Tensor:
    return x[0].permute(1, 2, 0).contiguous()


class DiffusionLoss(NamedTuple):
    value: torch.Tensor
    grad: torch.Tensor  # d loss / d conditioning render, H x W x N
    t: int
    eps: torch.Tensor  # H x W x N


def diffusion_loss(
    net: DenoiserNet,
    x_gt: HyperCube | torch.Tensor,
    x_render: HyperCube | torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator,
    *,
    t: int | None = None,
    eps: torch.Tensor | None = None,
) -> DiffusionLoss:
    """Epsilon-prediction MSE conditioned on the render.

    Network parameter gradients are accumulated into ``.grad``; the gradient
    with respect to the render is returned.
    """
    gt, render = as_tensor(x_gt), as_tensor(x_render)
    if gt.shape != render.shape:
        raise ValueError(f"Target {tuple(gt.shape)} and render {tuple(render.shape)} differ in shape")
    dtype = next(net.parameters()).dtype
    if t is None:
        t = int(torch.randint(1, sched.steps + 1, (1,), generator=generator))
    sched.check_step(t)
    if eps is None:
        eps = torch.randn(gt.shape, generator=generator, dtype=dtype)
    elif eps.shape != gt.shape:
        raise ValueError(f"Noise shape {tuple(eps.shape)} does not match {tuple(gt.shape)}")

    x0 = _to_batch(gt, dtype)
    noise = _to_batch(eps, dtype)
    cond = _to_batch(render.detach(), dtype).clone().requires_grad_(True)
    with torch.enable_grad():
        x_t = forward_noise(x0, t, noise, sched)
        pred = net(x_t, torch.tensor([t]), cond)
        loss = F.mse_loss(pred, noise)
        loss.backward()
    return DiffusionLoss(loss.detach(), _from_batch(cond.grad), t, eps)


def denoised_estimate(
    net: DenoiserNet,
    x_gt: HyperCube | torch.Tensor,
    x_render: HyperCube | torch.Tensor,
    sched: NoiseSchedule,
    t: int,
    eps: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One-step x0 estimate from x_t, differentiable in the net and the render.

    Returns (estimate H x W x N with autograd history, conditioning leaf). Call
    ``estimate.backward(grad)`` and read the render gradient from the leaf.
    """
    gt, render = as_tensor(x_gt), as_tensor(x_render)
    dtype = next(net.parameters()).dtype
    ab = sched.alpha_bar(t)
    cond = _to_batch(render.detach(), dtype).clone().requires_grad_(True)
    noise = _to_batch(eps, dtype)
    with torch.enable_grad():
        x_t = forward_noise(_to_batch(gt, dtype), t, noise, sched)
        eps_hat = net(x_t, torch.tensor([t]), cond)
        x0_hat = (x_t - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
        estimate = x0_hat[0].permute(1, 2, 0)
    return estimate, cond


def cond_gradient(cond: torch.Tensor) -> torch.Tensor:
    return _from_batch(cond.grad)


def respaced_timesteps(steps: int, num_steps: int) -> list[int]:
    """Evenly spaced timesteps in descending order, always starting at T."""
    if not 1 <= num_steps <= steps:
        raise ValueError(f"num_steps must be in 1..{steps}, got {num_steps}")
    if num_steps == 1:
        return [steps]
    chosen = {round(1 + i * (steps - 1) / (num_steps - 1)) for i in range(num_steps)}
    return sorted(chosen, reverse=True)


@torch.no_grad()
def denoise(
    net: DenoiserNet,
    x_render: HyperCube,
    sched: NoiseSchedule,
    generator: torch.Generator,
    num_steps: int | None = None,
) -> HyperCube:
    """Ancestral sampling from pure noise, every step conditioned on the render."""
    num_steps = sched.steps if num_steps is None else num_steps
    timesteps = respaced_timesteps(sched.steps, num_steps)
    dtype = next(net.parameters()).dtype
    cond = _to_batch(x_render, dtype)
    x = torch.randn(cond.shape, generator=generator, dtype=dtype)

    for i, t in enumerate(timesteps):
        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(timesteps[i + 1]) if i + 1 < len(timesteps) else 1.0
        beta_t = 1 - ab_t / ab_prev
        eps_hat = net(x, torch.tensor([t]), cond)
        x0_hat = ((x - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)).clamp(0, 1)
        mean = (
            math.sqrt(ab_prev) * beta_t / (1 - ab_t) * x0_hat
            + math.sqrt(1 - beta_t) * (1 - ab_prev) / (1 - ab_t) * x
        )
        if i + 1 < len(timesteps):
            var = beta_t * (1 - ab_prev) / (1 - ab_t)
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=generator, dtype=dtype)
        else:
            x = mean
        logger.debug("Reverse step t=%d (%d/%d)", t, i + 1, len(timesteps))

    out = _from_batch(x.clamp(0, 1)).to(torch.float32)
    return x_render.with_data(out)
