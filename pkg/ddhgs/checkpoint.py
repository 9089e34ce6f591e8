from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .gaussian_scene import GaussianCloud, cloud_from_bytes, cloud_to_bytes
from .hypercube import MagicMismatchError, TruncatedPayloadError, atomic_write_bytes
from .wavelength_encoder import EncoderParams, encoder_from_bytes, encoder_to_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DDHG"

# File layout (little-endian):
#   magic "DDHG" | u32 iteration | sections...
#   section = 4-byte tag | u64 payload length | payload
_HEADER = struct.Struct("<4sI")
_SECTION = struct.Struct("<4sQ")

# Named-tensor tables: u32 count, then per entry
#   u16 name length | name utf-8 | u8 dtype code | u8 ndim | ndim x u64 dims | raw bytes
_DTYPES: dict[int, tuple[torch.dtype, str]] = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "u1"),
    4: (torch.bool, "?"),
    5: (torch.int32, "<i4"),
}
_DTYPE_CODES = {dtype: code for code, (dtype, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    iteration: int
    config_yaml: str
    cloud: GaussianCloud
    encoder: EncoderParams | None = None
    denoiser: dict[str, torch.Tensor] | None = None
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    stats: dict[str, torch.Tensor] = field(default_factory=dict)


def tensors_to_bytes(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPE_CODES:
            raise ValueError(f"Cannot store tensor {name!r} of dtype {tensor.dtype}")
        code = _DTYPE_CODES[tensor.dtype]
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", code, tensor.dim()))
        parts.append(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
        parts.append(tensor.numpy().astype(_DTYPES[code][1]).tobytes())
    return b"".join(parts)


def tensors_from_bytes(raw: bytes) -> dict[str, torch.Tensor]:
    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise TruncatedPayloadError("Tensor table truncated")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    offset = 0
    (count,) = take("<I")
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if offset + name_len > len(raw):
            raise TruncatedPayloadError("Tensor table truncated in a name")
        name = raw[offset:offset + name_len].decode()
        offset += name_len
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise ValueError(f"Unknown dtype code {code} for tensor {name!r}")
        shape = take(f"<{ndim}Q") if ndim else ()
        dtype, np_dtype = _DTYPES[code]
        numel = int(np.prod(shape)) if shape else 1
        nbytes = numel * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(raw):
            raise TruncatedPayloadError(f"Tensor table truncated in {name!r}")
        values = np.frombuffer(raw, dtype=np_dtype, count=numel, offset=offset).copy()
        offset += nbytes
        out[name] = torch.from_numpy(values.reshape(shape)).to(dtype)
    if offset != len(raw):
        raise TruncatedPayloadError("Tensor table has trailing bytes")
    return out


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    sections: list[tuple[bytes, bytes]] = [
        (b"CONF", ckpt.config_yaml.encode()),
        (b"CLOU", cloud_to_bytes(ckpt.cloud)),
    ]
    if ckpt.encoder is not None:
        sections.append((b"ENCO", encoder_to_bytes(ckpt.encoder)))
    if ckpt.denoiser is not None:
        sections.append((b"DENO", tensors_to_bytes(ckpt.denoiser)))
    sections.append((b"OPTM", tensors_to_bytes(ckpt.optimizer)))
    sections.append((b"RNGS", tensors_to_bytes(ckpt.rng)))
    sections.append((b"STAT", tensors_to_bytes(ckpt.stats)))

    parts = [_HEADER.pack(CHECKPOINT_MAGIC, ckpt.iteration)]
    for tag, payload in sections:
        parts.append(_SECTION.pack(tag, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"File too short for a checkpoint header ({len(raw)} bytes)")
    magic, iteration = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"Expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")

    sections: dict[bytes, bytes] = {}
    offset = _HEADER.size
    while offset < len(raw):
        if offset + _SECTION.size > len(raw):
            raise TruncatedPayloadError("Checkpoint truncated in a section header")
        tag, length = _SECTION.unpack_from(raw, offset)
        offset += _SECTION.size
        if offset + length > len(raw):
            raise TruncatedPayloadError(f"Checkpoint section {tag!r} truncated")
        sections[tag] = raw[offset:offset + length]
        offset += length

    for required in (b"CONF", b"CLOU"):
        if required not in sections:
            raise TruncatedPayloadError(f"Checkpoint is missing the {required.decode()} section")

    return Checkpoint(
        iteration=iteration,
        config_yaml=sections[b"CONF"].decode(),
        cloud=cloud_from_bytes(sections[b"CLOU"]),
        encoder=encoder_from_bytes(sections[b"ENCO"]) if b"ENCO" in sections else None,
        denoiser=tensors_from_bytes(sections[b"DENO"]) if b"DENO" in sections else None,
        optimizer=tensors_from_bytes(sections.get(b"OPTM", struct.pack("<I", 0))),
        rng=tensors_from_bytes(sections.get(b"RNGS", struct.pack("<I", 0))),
        stats=tensors_from_bytes(sections.get(b"STAT", struct.pack("<I", 0))),
    )


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    payload = checkpoint_to_bytes(ckpt)
    atomic_write_bytes(Path(path), payload)
    logger.info("Saved checkpoint at iteration %d to %s (%d bytes)", ckpt.iteration, path, len(payload))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = checkpoint_from_bytes(path.read_bytes())
    logger.info("Loaded checkpoint at iteration %d from %s", ckpt.iteration, path)
    return ckpt


def optimizer_to_tensors(optimizer: torch.optim.Optimizer, prefix: str) -> dict[str, torch.Tensor]:
    """Flatten an optimizer's per-parameter state and group learning rates."""
    state = optimizer.state_dict()
    out: dict[str, torch.Tensor] = {}
    for index, group in enumerate(state["param_groups"]):
        out[f"{prefix}.group{index}.lr"] = torch.tensor(float(group["lr"]), dtype=torch.float64)
    for param_id, entries in sorted(state["state"].items()):
        for key, value in sorted(entries.items()):
            out[f"{prefix}.{param_id}.{key}"] = torch.as_tensor(value)
    return out


def optimizer_from_tensors(
    optimizer: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], prefix: str
) -> None:
    state = optimizer.state_dict()
    for index, group in enumerate(state["param_groups"]):
        key = f"{prefix}.group{index}.lr"
        if key in tensors:
            group["lr"] = float(tensors[key])
    restored: dict[int, dict[str, torch.Tensor]] = {}
    head = prefix + "."
    for name, value in tensors.items():
        if not name.startswith(head) or ".group" in name[len(prefix):]:
            continue
        param_id, key = name[len(head):].split(".", 1)
        restored.setdefault(int(param_id), {})[key] = value.clone()
    state["state"] = restored
    optimizer.load_state_dict(state)
