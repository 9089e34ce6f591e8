from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .hypercube import HyperCube, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LOSS_CSV_HEADER = "step,total,l1,ssim,kl,cos,diff"


class LossValue(NamedTuple):
    value: torch.Tensor  # 0-d
    grad: torch.Tensor  # d value / d pred, same shape as pred


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.8
    w2: float = 0.2
    w3: float = 0.05
    w4: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w1", "w2", "w3", "w4", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {getattr(self, name)}")
        if max(self.w1, self.w2, self.w3, self.w4) <= 0:
            raise ValueError("At least one of w1..w4 must be positive")


@dataclass(frozen=True)
class LossReport:
    total: float
    l1: float
    ssim: float  # similarity, the loss term is 1 - ssim
    spectral_kl: float
    spectral_cos: float  # mean (1 - cos)
    diffusion: float

    def components(self) -> dict[str, float]:
        return {
            "l1": self.l1,
            "ssim": self.ssim,
            "kl": self.spectral_kl,
            "cos": self.spectral_cos,
            "diff": self.diffusion,
        }

    def csv_row(self, step: int) -> str:
        values = [self.total, self.l1, self.ssim, self.spectral_kl, self.spectral_cos, self.diffusion]
        return ",".join([str(step), *(f"{v:.9g}" for v in values)])


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.dim() != 3:
        raise ValueError(f"Expected H x W x N tensors, got {pred.dim()} dims")


# ----------------------------------------------------------------------
# L1
# ----------------------------------------------------------------------


def l1_loss(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> LossValue:
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)
    diff = pred - gt
    return LossValue(diff.abs().mean(), torch.sign(diff) / diff.numel())


# ----------------------------------------------------------------------
# SSIM
# ----------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _ssim_terms(x: torch.Tensor, y: torch.Tensor):
    bands = x.shape[1]
    window = gaussian_window(dtype=x.dtype).expand(bands, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()

    def filt(t):
        return F.conv2d(t, window, groups=bands)

    mu_x, mu_y = filt(x), filt(y)
    exx, eyy, exy = filt(x * x), filt(y * y), filt(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (exy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = (exx - mu_x * mu_x) + (eyy - mu_y * mu_y) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return window, mu_x, mu_y, a1, a2, b1, b2, s


def _to_nchw(t: torch.Tensor) -> torch.Tensor:
    return t.permute(2, 0, 1).unsqueeze(0)


def ssim_value(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> torch.Tensor:
    """Mean per-band SSIM over all valid 11 x 11 window positions."""
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)
    _check_window(pred)
    return _ssim_terms(_to_nchw(pred), _to_nchw(gt))[-1].mean()


def _check_window(t: torch.Tensor) -> None:
    if t.shape[0] < SSIM_WINDOW or t.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"Image {t.shape[0]}x{t.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )


def ssim_loss(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> LossValue:
    """1 - SSIM with its gradient with respect to ``pred``."""
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)
    _check_window(pred)
    x, y = _to_nchw(pred), _to_nchw(gt)
    window, mu_x, mu_y, a1, a2, b1, b2, s = _ssim_terms(x, y)
    bands = x.shape[1]

    g = torch.full_like(s, 1.0 / s.numel())
    d_mu_x = g * s * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2)
    d_exx = g * (-s / b2)
    d_exy = g * (2 * s / a2)

    def back(t):
        return F.conv_transpose2d(t, window, groups=bands)

    d_x = back(d_mu_x) + 2 * x * back(d_exx) + y * back(d_exy)
    grad = -d_x[0].permute(1, 2, 0)
    return LossValue(1 - s.mean(), grad.contiguous())


# ----------------------------------------------------------------------
# Spectral distribution loss
# ----------------------------------------------------------------------


def spectral_normalize(cube: HyperCube | torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax along the band axis."""
    return torch.softmax(as_tensor(cube), dim=-1)


def _spectral_parts(pred: torch.Tensor, gt: torch.Tensor):
    log_p = torch.log_softmax(pred, dim=-1)
    log_g = torch.log_softmax(gt, dim=-1)
    d_p, d_g = log_p.exp(), log_g.exp()
    kl = (d_g * (log_g - log_p)).sum(-1)
    norm_p = d_p.norm(dim=-1, keepdim=True)
    norm_g = d_g.norm(dim=-1, keepdim=True)
    cos = (d_p * d_g).sum(-1, keepdim=True) / (norm_p * norm_g)
    return d_p, d_g, kl, cos, norm_p, norm_g


def spectral_terms(pred: HyperCube | torch.Tensor, gt: HyperCube | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-mean KL(D_gt || D_pred) and pixel-mean (1 - cos(D_gt, D_pred))."""
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)
    _, _, kl, cos, _, _ = _spectral_parts(pred, gt)
    return kl.mean(), (1 - cos).mean()


def spectral_loss(
    pred: HyperCube | torch.Tensor,
    gt: HyperCube | torch.Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> LossValue:
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)
    d_p, d_g, kl, cos, norm_p, norm_g = _spectral_parts(pred, gt)
    pixels = kl.numel()
    value = alpha * kl.mean() + beta * (1 - cos).mean()

    grad_kl = d_p - d_g
    u = d_g / (norm_g * norm_p) - cos * d_p / (norm_p * norm_p)
    grad_cos = d_p * (u - (u * d_p).sum(-1, keepdim=True))
    grad = (alpha * grad_kl - beta * grad_cos) / pixels
    return LossValue(value, grad)


# ----------------------------------------------------------------------
# Overall objective
# ----------------------------------------------------------------------


def total_loss(
    pred: HyperCube | torch.Tensor,
    gt: HyperCube | torch.Tensor,
    diffusion_term: LossValue | None,
    weights: LossWeights,
) -> tuple[LossReport, torch.Tensor]:
    """Weighted objective; terms with zero weight contribute no gradient."""
    pred, gt = as_tensor(pred), as_tensor(gt).to(as_tensor(pred).dtype)
    _check_pair(pred, gt)

    l1 = l1_loss(pred, gt)
    ssim = ssim_loss(pred, gt)
    kl, cos_term = spectral_terms(pred, gt)
    diff_value = 0.0 if diffusion_term is None else float(diffusion_term.value)

    grad = torch.zeros_like(pred)
    if weights.w1:
        grad = grad + weights.w1 * l1.grad
    if weights.w2:
        grad = grad + weights.w2 * ssim.grad
    if weights.w3:
        grad = grad + weights.w3 * spectral_loss(pred, gt, weights.alpha, weights.beta).grad
    if weights.w4 and diffusion_term is not None:
        if diffusion_term.grad.shape != pred.shape:
            raise ValueError("Diffusion conditioning gradient does not match the render shape")
        grad = grad + weights.w4 * diffusion_term.grad.to(pred.dtype)

    report = make_report(
        weights,
        l1=float(l1.value),
        ssim=1.0 - float(ssim.value),
        spectral_kl=float(kl),
        spectral_cos=float(cos_term),
        diffusion=diff_value,
    )
    return report, grad


def make_report(
    weights: LossWeights,
    *,
    l1: float,
    ssim: float,
    spectral_kl: float,
    spectral_cos: float,
    diffusion: float,
) -> LossReport:
    total = (
        weights.w1 * l1
        + weights.w2 * (1.0 - ssim)
        + weights.w3 * (weights.alpha * spectral_kl + weights.beta * spectral_cos)
        + weights.w4 * diffusion
    )
    return LossReport(total, l1, ssim, spectral_kl, spectral_cos, diffusion)


def first_non_finite(report: LossReport) -> str | None:
    for name, value in (*report.components().items(), ("total", report.total)):
        if not math.isfinite(value):
            return name
    return None
