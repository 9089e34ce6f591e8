from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .gaussian_scene import SH_COEFFS

logger = logging.getLogger(__name__)

ACTIVATION = "softplus"
ENCODER_MAGIC = b"WEN1"
_HEADER = struct.Struct("<4sII")  # magic, num_frequencies, layer count
_LAYER = struct.Struct("<II")  # out, in


@dataclass
class EncoderParams:
    """Sinusoidal-embedding MLP producing one SH offset row per band.

    ``weights[i]`` has shape (out, in); ``biases[i]`` has shape (out,).
    The same container carries parameter gradients from ``encoder_backward``.
    """

    num_frequencies: int
    hidden_sizes: list[int]
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    activation: str = ACTIVATION

    def __post_init__(self) -> None:
        widths = [2 * self.num_frequencies, *self.hidden_sizes, SH_COEFFS]
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError(
                f"Encoder with hidden sizes {self.hidden_sizes} needs {len(widths) - 1} layers, "
                f"got {len(self.weights)} weights and {len(self.biases)} biases"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tuple(w.shape) != (widths[i + 1], widths[i]) or tuple(b.shape) != (widths[i + 1],):
                raise ValueError(
                    f"Layer {i} expects weight {(widths[i + 1], widths[i])} and bias {(widths[i + 1],)}, "
                    f"got {tuple(w.shape)} and {tuple(b.shape)}"
                )
        if self.activation != ACTIVATION:
            raise ValueError(f"Unsupported activation {self.activation!r}")

    def parameters(self) -> list[torch.Tensor]:
        return [*self.weights, *self.biases]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())


def init_encoder(
    num_frequencies: int,
    hidden_sizes: list[int],
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> EncoderParams:
    """Uniform fan-in init for hidden layers; the output layer starts at zero."""
    if num_frequencies < 1:
        raise ValueError(f"num_frequencies must be >= 1, got {num_frequencies}")
    widths = [2 * num_frequencies, *hidden_sizes, SH_COEFFS]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == len(widths) - 2:
            weights.append(torch.zeros(fan_out, fan_in, dtype=dtype))
            biases.append(torch.zeros(fan_out, dtype=dtype))
            continue
        bound = 1.0 / math.sqrt(fan_in)
        weights.append((torch.rand(fan_out, fan_in, generator=generator, dtype=dtype) * 2 - 1) * bound)
        biases.append((torch.rand(fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound)
    return EncoderParams(num_frequencies, list(hidden_sizes), weights, biases)


def _normalize(lambda_nm: torch.Tensor, wl_range: tuple[float, float]) -> torch.Tensor:
    lo, hi = float(wl_range[0]), float(wl_range[1])
    if not lo < hi:
        raise ValueError(f"Wavelength range must satisfy min < max, got [{lo}, {hi}]")
    if bool(((lambda_nm < lo) | (lambda_nm > hi)).any()):
        logger.warning(
            "Wavelengths %s outside [%g, %g] nm; clamping", lambda_nm.tolist(), lo, hi
        )
        lambda_nm = lambda_nm.clamp(lo, hi)
    return (lambda_nm - lo) / (hi - lo)


def embed(lambda_nm, wl_range: tuple[float, float], num_frequencies: int = 6) -> torch.Tensor:
    """[sin(2^k pi l), ..., cos(2^k pi l), ...] of the range-normalized wavelength."""
    lam = torch.as_tensor(lambda_nm, dtype=torch.float64)
    norm = _normalize(lam, wl_range)
    freqs = (2.0 ** torch.arange(num_frequencies, dtype=torch.float64)) * math.pi
    angles = norm[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _forward(params: EncoderParams, wavelengths, wl_range):
    dtype = params.weights[0].dtype
    h = embed(wavelengths, wl_range, params.num_frequencies).to(dtype).reshape(-1, 2 * params.num_frequencies)
    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else F.softplus(z)
    return h, inputs, pre


def offsets_for(params: EncoderParams, wavelengths, wl_range: tuple[float, float]) -> torch.Tensor:
    """Return the N x 16 offset matrix; row i is the MLP output for wavelength i."""
    out, _, _ = _forward(params, wavelengths, wl_range)
    return out


def encoder_backward(
    params: EncoderParams,
    wavelengths,
    wl_range: tuple[float, float],
    d_offsets: torch.Tensor,
) -> EncoderParams:
    out, inputs, pre = _forward(params, wavelengths, wl_range)
    if d_offsets.shape != out.shape:
        raise ValueError(f"d_offsets shape {tuple(d_offsets.shape)} does not match {tuple(out.shape)}")
    grad = d_offsets.to(out.dtype)
    d_weights: list[torch.Tensor] = []
    d_biases: list[torch.Tensor] = []
    for i in reversed(range(len(params.weights))):
        if i != len(params.weights) - 1:
            grad = grad * torch.sigmoid(pre[i])
        d_weights.append(grad.T @ inputs[i])
        d_biases.append(grad.sum(0))
        grad = grad @ params.weights[i]
    d_weights.reverse()
    d_biases.reverse()
    return EncoderParams(params.num_frequencies, list(params.hidden_sizes), d_weights, d_biases)


def lipschitz_estimate(params: EncoderParams) -> float:
    """Upper bound on the MLP's Lipschitz constant (softplus is 1-Lipschitz)."""
    bound = 1.0
    for w in params.weights:
        bound *= float(torch.linalg.matrix_norm(w.double(), ord=2))
    return bound


def encoder_to_bytes(params: EncoderParams) -> bytes:
    parts = [_HEADER.pack(ENCODER_MAGIC, params.num_frequencies, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        parts.append(_LAYER.pack(w.shape[0], w.shape[1]))
        parts.append(w.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
        parts.append(b.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def encoder_from_bytes(raw: bytes) -> EncoderParams:
    if len(raw) < _HEADER.size:
        raise ValueError(f"Encoder block too short ({len(raw)} bytes)")
    magic, num_frequencies, layers = _HEADER.unpack_from(raw, 0)
    if magic != ENCODER_MAGIC:
        raise ValueError(f"Expected encoder magic {ENCODER_MAGIC!r}, found {magic!r}")
    offset = _HEADER.size
    weights, biases = [], []
    for _ in range(layers):
        if offset + _LAYER.size > len(raw):
            raise ValueError("Encoder block truncated in layer header")
        out_dim, in_dim = _LAYER.unpack_from(raw, offset)
        offset += _LAYER.size
        count = out_dim * in_dim + out_dim
        if offset + 4 * count > len(raw):
            raise ValueError("Encoder block truncated in layer payload")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32)
        offset += 4 * count
        weights.append(torch.from_numpy(values[: out_dim * in_dim].reshape(out_dim, in_dim).copy()))
        biases.append(torch.from_numpy(values[out_dim * in_dim:].copy()))
    if offset != len(raw):
        raise ValueError("Encoder block has trailing bytes")
    hidden = [w.shape[0] for w in weights[:-1]]
    return EncoderParams(num_frequencies, hidden, weights, biases)
