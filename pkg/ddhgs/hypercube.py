from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

CUBE_MAGIC = b"HSC1"

# HSC1 layout (little-endian, no padding):
#   magic "HSC1" | u32 H | u32 W | u32 N | N x f32 wavelengths (nm)
#   | H*W*N x f32 radiance in (row, col, band) order
_HEADER = struct.Struct("<4sIII")


class CubeFormatError(ValueError):
    """A cube (or cube file) violates the HSC1 format or the HyperCube invariants."""


class MagicMismatchError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class WavelengthOrderError(CubeFormatError):
    pass


class NonFiniteValueError(CubeFormatError):
    pass


@dataclass(frozen=True, eq=False)
class HyperCube:
    """H x W x N radiance volume with per-band wavelengths in nanometers.

    ``data`` is band-innermost, shape (height, width, bands). Treat it as
    read-only; every operation that changes radiance builds a new cube.
    """

    height: int
    width: int
    bands: int
    wavelengths: torch.Tensor
    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.wavelengths.shape != (self.bands,):
            raise WavelengthOrderError(
                f"Expected {self.bands} wavelengths, got shape {tuple(self.wavelengths.shape)}"
            )
        if not bool(torch.isfinite(self.wavelengths).all()):
            raise NonFiniteValueError("Wavelengths contain NaN or infinite values")
        if self.bands > 1 and not bool((self.wavelengths[1:] > self.wavelengths[:-1]).all()):
            raise WavelengthOrderError("Wavelengths must be strictly increasing")
        if self.data.shape != (self.height, self.width, self.bands):
            raise TruncatedPayloadError(
                f"Data shape {tuple(self.data.shape)} does not match "
                f"{(self.height, self.width, self.bands)}"
            )
        _check_radiance(self.data)

    @classmethod
    def from_tensor(cls, data: torch.Tensor, wavelengths) -> HyperCube:
        wl = torch.as_tensor(wavelengths, dtype=torch.float32).reshape(-1)
        h, w, n = data.shape
        return cls(height=h, width=w, bands=n, wavelengths=wl, data=data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.bands)

    @property
    def wavelength_range(self) -> tuple[float, float]:
        return float(self.wavelengths[0]), float(self.wavelengths[-1])

    def with_data(self, data: torch.Tensor) -> HyperCube:
        """Return a cube sharing this cube's wavelengths with new radiance."""
        return HyperCube.from_tensor(data, self.wavelengths)

    def equals(self, other: HyperCube) -> bool:
        return (
            self.shape == other.shape
            and torch.equal(self.wavelengths, other.wavelengths)
            and torch.equal(self.data, other.data)
        )


def _check_radiance(data: torch.Tensor) -> None:
    if not bool(torch.isfinite(data).all()):
        raise NonFiniteValueError("Radiance contains NaN or infinite values")
    if bool((data < 0).any()):
        raise CubeFormatError("Radiance must be non-negative")


def as_tensor(x: HyperCube | torch.Tensor) -> torch.Tensor:
    return x.data if isinstance(x, HyperCube) else x


def pixel_spectrum(cube: HyperCube, row: int, col: int) -> torch.Tensor:
    """Return the N band values at (row, col), in wavelength order."""
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise IndexError(
            f"Pixel ({row}, {col}) outside {cube.height}x{cube.width} cube"
        )
    return cube.data[row, col].clone()


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def cube_to_bytes(cube: HyperCube) -> bytes:
    _check_radiance(cube.data)
    header = _HEADER.pack(CUBE_MAGIC, cube.height, cube.width, cube.bands)
    wl = cube.wavelengths.detach().cpu().numpy().astype("<f4").tobytes()
    payload = cube.data.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
    return header + wl + payload


def cube_from_bytes(raw: bytes) -> HyperCube:
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"File too short for HSC1 header ({len(raw)} bytes)")
    magic, h, w, n = _HEADER.unpack_from(raw, 0)
    if magic != CUBE_MAGIC:
        raise MagicMismatchError(f"Expected magic {CUBE_MAGIC!r}, found {magic!r}")

    expected = _HEADER.size + 4 * n + 4 * h * w * n
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "has trailing bytes"
        raise TruncatedPayloadError(
            f"Payload {kind}: header declares {expected} bytes, file has {len(raw)}"
        )

    offset = _HEADER.size
    wl = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float32)
    offset += 4 * n
    values = np.frombuffer(raw, dtype="<f4", count=h * w * n, offset=offset)
    data = torch.from_numpy(values.astype(np.float32).reshape(h, w, n))
    return HyperCube(height=h, width=w, bands=n, wavelengths=torch.from_numpy(wl), data=data)


def read_cube(path: Path) -> HyperCube:
    path = Path(path)
    cube = cube_from_bytes(path.read_bytes())
    logger.debug("Read %dx%dx%d cube from %s", cube.height, cube.width, cube.bands, path)
    return cube


def write_cube(cube: HyperCube, path: Path) -> None:
    atomic_write_bytes(Path(path), cube_to_bytes(cube))
    logger.debug("Wrote %dx%dx%d cube to %s", cube.height, cube.width, cube.bands, path)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
