from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .hypercube import CubeFormatError, MagicMismatchError, TruncatedPayloadError, atomic_write_bytes

logger = logging.getLogger(__name__)

SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2
NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
COLOR_SHIFT = 0.5

# Real SH normalization constants, sign convention of the 3DGS reference.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

CLOUD_MAGIC = b"GSC1"
_CLOUD_HEADER = struct.Struct("<4sII")


# ----------------------------------------------------------------------
# Scene types
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: torch.Tensor  # (3,)
    rotation: torch.Tensor  # (4,) quaternion (w, x, y, z)
    log_scale: torch.Tensor  # (3,)
    opacity_logit: torch.Tensor  # ()
    sh: torch.Tensor  # (N, 16)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def covariance(self) -> torch.Tensor:
        return covariance3d(self.rotation, self.log_scale)


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Structure-of-arrays scene: G Gaussians sharing N spectral bands."""

    means: torch.Tensor  # (G, 3)
    rotations: torch.Tensor  # (G, 4)
    log_scales: torch.Tensor  # (G, 3)
    opacity_logits: torch.Tensor  # (G,)
    sh: torch.Tensor  # (G, N, 16)
    wavelengths: torch.Tensor  # (N,)

    def __post_init__(self) -> None:
        g = self.means.shape[0]
        n = self.wavelengths.shape[0]
        expected = {
            "means": (g, 3),
            "rotations": (g, 4),
            "log_scales": (g, 3),
            "opacity_logits": (g,),
            "sh": (g, n, SH_COEFFS),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                raise ValueError(f"GaussianCloud.{name} has shape {actual}, expected {shape}")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def bands(self) -> int:
        return self.wavelengths.shape[0]

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def gaussian(self, index: int) -> Gaussian:
        return Gaussian(
            mean=self.means[index],
            rotation=self.rotations[index],
            log_scale=self.log_scales[index],
            opacity_logit=self.opacity_logits[index],
            sh=self.sh[index],
        )

    def to(self, dtype: torch.dtype) -> GaussianCloud:
        return replace(
            self,
            means=self.means.to(dtype),
            rotations=self.rotations.to(dtype),
            log_scales=self.log_scales.to(dtype),
            opacity_logits=self.opacity_logits.to(dtype),
            sh=self.sh.to(dtype),
        )

    def detached(self) -> GaussianCloud:
        return replace(
            self,
            means=self.means.detach(),
            rotations=self.rotations.detach(),
            log_scales=self.log_scales.detach(),
            opacity_logits=self.opacity_logits.detach(),
            sh=self.sh.detach(),
        )

    def equals(self, other: GaussianCloud) -> bool:
        return all(
            getattr(self, f).shape == getattr(other, f).shape
            and torch.equal(getattr(self, f), getattr(other, f))
            for f in ("means", "rotations", "log_scales", "opacity_logits", "sh", "wavelengths")
        )


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``world_to_camera`` is a 3x4 rigid transform [R | t] mapping world points
    into camera space.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: torch.Tensor
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if tuple(self.world_to_camera.shape) != (3, 4):
            raise ValueError("world_to_camera must be a 3x4 matrix")
        rot = self.world_to_camera[:, :3].to(torch.float64)
        err = (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max()
        if float(err) > 1e-6:
            raise ValueError(f"world_to_camera rotation is not orthonormal (error {float(err):.2e})")

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        *,
        fx: float,
        fy: float,
        width: int,
        height: int,
        up=(0.0, 0.0, 1.0),
    ) -> CameraView:
        eye_t = torch.as_tensor(eye, dtype=torch.float64)
        forward = torch.as_tensor(target, dtype=torch.float64) - eye_t
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, torch.as_tensor(up, dtype=torch.float64))
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rot = torch.stack([right, down, forward])
        w2c = torch.cat([rot, (-rot @ eye_t)[:, None]], dim=1)
        return cls(
            fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
            world_to_camera=w2c, width=width, height=height,
        )

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation


# ----------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from quaternions (..., 4), normalized first."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, -2)


def rotation_backward(q: torch.Tensor, d_rot: torch.Tensor) -> torch.Tensor:
    """Adjoint of quaternion_to_rotation, including the normalization."""
    norm = q.norm(dim=-1, keepdim=True)
    qn = q / norm
    w, x, y, z = qn.unbind(-1)
    g = d_rot
    d_w = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
               - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    d_x = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
               - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    d_y = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
               + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    d_z = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
               - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    d_qn = torch.stack([d_w, d_x, d_y, d_z], -1)
    return (d_qn - qn * (qn * d_qn).sum(-1, keepdim=True)) / norm


def covariance3d(rotation: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for quaternions (..., 4) and log-scales (..., 3)."""
    m = quaternion_to_rotation(rotation) * torch.exp(log_scale)[..., None, :]
    return m @ m.transpose(-1, -2)


def covariance3d_backward(
    rotation: torch.Tensor, log_scale: torch.Tensor, d_sigma: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    rot = quaternion_to_rotation(rotation)
    scale = torch.exp(log_scale)
    m = rot * scale[..., None, :]
    d_m = (d_sigma + d_sigma.transpose(-1, -2)) @ m
    d_scale = (rot * d_m).sum(-2)
    d_rot = d_m * scale[..., None, :]
    return rotation_backward(rotation, d_rot), d_scale * scale


def to_camera(points: torch.Tensor, cam: CameraView) -> torch.Tensor:
    w2c = cam.world_to_camera.to(points.dtype)
    return points @ w2c[:, :3].T + w2c[:, 3]


def project_points(mean_cam: torch.Tensor, cam: CameraView) -> torch.Tensor:
    """Pixel coordinates (u, v) of camera-space points; callers cull z <= near first."""
    z = mean_cam[..., 2]
    u = cam.fx * mean_cam[..., 0] / z + cam.cx
    v = cam.fy * mean_cam[..., 1] / z + cam.cy
    return torch.stack([u, v], -1)


def projection_jacobian(mean_cam: torch.Tensor, cam: CameraView) -> torch.Tensor:
    """Jacobian (..., 2, 3) of (fx x/z, fy y/z) at camera-space points."""
    x, y, z = mean_cam.unbind(-1)
    zero = torch.zeros_like(z)
    row0 = torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], -1)
    row1 = torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], -1)
    return torch.stack([row0, row1], -2)


def project_covariance(
    sigma: torch.Tensor, mean_cam: torch.Tensor, cam: CameraView, near: float = NEAR_PLANE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Screen-space covariance J W Sigma W^T J^T + 0.3 I and the in-front mask.

    Points at depth <= ``near`` are culled: their covariance is evaluated at a
    placeholder depth and must be ignored by the caller.
    """
    valid = mean_cam[..., 2] > near
    safe = torch.where(valid[..., None], mean_cam, torch.ones_like(mean_cam))
    jac = projection_jacobian(safe, cam)
    t = jac @ cam.rotation.to(sigma.dtype)
    cov = t @ sigma @ t.transpose(-1, -2)
    cov = cov + COV2D_FLOOR * torch.eye(2, dtype=sigma.dtype)
    return cov, valid


# ----------------------------------------------------------------------
# Spherical harmonics
# ----------------------------------------------------------------------


def sh_basis(direction: torch.Tensor) -> torch.Tensor:
    """Real SH basis (..., 16) for l = 0..3, index l*l + l + m.

    Non-unit inputs are normalized before evaluation.
    """
    d = direction / direction.norm(dim=-1, keepdim=True)
    x, y, z = d.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    c2, c3 = SH_C2, SH_C3
    return torch.stack(
        [
            torch.full_like(x, SH_C0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            c2[0] * x * y,
            c2[1] * y * z,
            c2[2] * (2 * zz - xx - yy),
            c2[3] * x * z,
            c2[4] * (xx - yy),
            c3[0] * y * (3 * xx - yy),
            c3[1] * x * y * z,
            c3[2] * y * (4 * zz - xx - yy),
            c3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            c3[4] * x * (4 * zz - xx - yy),
            c3[5] * z * (xx - yy),
            c3[6] * x * (xx - 3 * yy),
        ],
        -1,
    )


def sh_basis_jacobian(unit_dir: torch.Tensor) -> torch.Tensor:
    """Partial derivatives (..., 16, 3) of the SH polynomials w.r.t. (x, y, z)."""
    x, y, z = unit_dir.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    zero = torch.zeros_like(x)
    c2, c3 = SH_C2, SH_C3

    def row(dx, dy, dz):
        return torch.stack([dx, dy, dz], -1)

    rows = [
        row(zero, zero, zero),
        row(zero, zero - SH_C1, zero),
        row(zero, zero, zero + SH_C1),
        row(zero - SH_C1, zero, zero),
        c2[0] * row(y, x, zero),
        c2[1] * row(zero, z, y),
        c2[2] * row(-2 * x, -2 * y, 4 * z),
        c2[3] * row(z, zero, x),
        c2[4] * row(2 * x, -2 * y, zero),
        c3[0] * row(6 * x * y, 3 * xx - 3 * yy, zero),
        c3[1] * row(y * z, x * z, x * y),
        c3[2] * row(-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z),
        c3[3] * row(-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy),
        c3[4] * row(4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z),
        c3[5] * row(2 * x * z, -2 * y * z, xx - yy),
        c3[6] * row(3 * xx - 3 * yy, -6 * x * y, zero),
    ]
    return torch.stack(rows, -2)


def view_directions(means: torch.Tensor, cam: CameraView) -> torch.Tensor:
    """Unit vectors from the camera center to each Gaussian mean."""
    offset = means - cam.center.to(means.dtype)
    return offset / offset.norm(dim=-1, keepdim=True)


def radiance(
    sh: torch.Tensor, direction: torch.Tensor, offsets: torch.Tensor | None = None
) -> torch.Tensor:
    """Per-band radiance max(sum_lm (SH + offset) Y_lm(v) + 0.5, 0).

    ``sh`` is (..., N, 16), ``direction`` is (..., 3), ``offsets`` is (N, 16).
    """
    if offsets is not None:
        if offsets.shape != sh.shape[-2:]:
            raise ValueError(
                f"Offsets shape {tuple(offsets.shape)} does not match SH shape {tuple(sh.shape[-2:])}"
            )
        sh = sh + offsets
    basis = sh_basis(direction)
    raw = (sh * basis[..., None, :]).sum(-1)
    return torch.clamp_min(raw + COLOR_SHIFT, 0.0)


def inverse_sigmoid(x: torch.Tensor | float) -> torch.Tensor:
    x = torch.as_tensor(x)
    return torch.log(x / (1 - x))


def rgb_to_sh_dc(value: torch.Tensor) -> torch.Tensor:
    """DC coefficient that makes a view-independent radiance equal to ``value``."""
    return (value - COLOR_SHIFT) / SH_C0


# ----------------------------------------------------------------------
# GSC1 scene files
# ----------------------------------------------------------------------


def cloud_to_bytes(cloud: GaussianCloud) -> bytes:
    g, n = len(cloud), cloud.bands
    records = torch.cat(
        [
            cloud.means,
            cloud.rotations,
            cloud.log_scales,
            cloud.opacity_logits[:, None],
            cloud.sh.reshape(g, n * SH_COEFFS),
        ],
        dim=1,
    )
    header = _CLOUD_HEADER.pack(CLOUD_MAGIC, g, n)
    body = records.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
    # Wavelength trailer follows the records.
    wl = cloud.wavelengths.detach().cpu().numpy().astype("<f4").tobytes()
    return header + body + wl


def cloud_from_bytes(raw: bytes) -> GaussianCloud:
    if len(raw) < _CLOUD_HEADER.size:
        raise TruncatedPayloadError("File too short for GSC1 header")
    magic, g, n = _CLOUD_HEADER.unpack_from(raw, 0)
    if magic != CLOUD_MAGIC:
        raise MagicMismatchError(f"Expected magic {CLOUD_MAGIC!r}, found {magic!r}")
    width = 11 + SH_COEFFS * n
    expected = _CLOUD_HEADER.size + 4 * n + 4 * g * width
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"GSC1 payload size mismatch: header declares {expected} bytes, got {len(raw)}"
        )
    offset = _CLOUD_HEADER.size
    rec = np.frombuffer(raw, dtype="<f4", count=g * width, offset=offset).astype(np.float32)
    offset += 4 * g * width
    wl = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float32)
    rec = torch.from_numpy(rec.reshape(g, width))
    if not bool(torch.isfinite(rec).all()):
        raise CubeFormatError("GSC1 records contain non-finite values")
    return GaussianCloud(
        means=rec[:, 0:3].clone(),
        rotations=rec[:, 3:7].clone(),
        log_scales=rec[:, 7:10].clone(),
        opacity_logits=rec[:, 10].clone(),
        sh=rec[:, 11:].reshape(g, n, SH_COEFFS).clone(),
        wavelengths=torch.from_numpy(wl),
    )


def read_cloud(path: Path) -> GaussianCloud:
    return cloud_from_bytes(Path(path).read_bytes())


def write_cloud(cloud: GaussianCloud, path: Path) -> None:
    atomic_write_bytes(Path(path), cloud_to_bytes(cloud))
    logger.debug("Wrote %d Gaussians to %s", len(cloud), path)


def random_quaternions(count: int, generator: torch.Generator) -> torch.Tensor:
    """Uniformly distributed unit quaternions (Shoemake's method)."""
    u = torch.rand(count, 3, generator=generator, dtype=torch.float64)
    a, b = torch.sqrt(1 - u[:, 0]), torch.sqrt(u[:, 0])
    t1, t2 = 2 * math.pi * u[:, 1], 2 * math.pi * u[:, 2]
    q = torch.stack([b * torch.cos(t2), a * torch.sin(t1), a * torch.cos(t1), b * torch.sin(t2)], -1)
    return q.to(torch.float32)
