from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import torch
import yaml

from .hypercube import atomic_write_bytes

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "config.effective.yaml"

# Keys a trained checkpoint still takes from --config / --set.
INFERENCE_KEYS = frozenset({"seed", "denoise_steps", "train_fraction"})

ABLATIONS: dict[str, dict[str, bool]] = {
    "3dgs": {"use_encoder": False, "use_spectral_loss": False, "use_diffusion": False},
    "3dgs+sl": {"use_encoder": False, "use_spectral_loss": True, "use_diffusion": False},
    "3dgs+we": {"use_encoder": True, "use_spectral_loss": False, "use_diffusion": False},
    "3dgs+we+sl": {"use_encoder": True, "use_spectral_loss": True, "use_diffusion": False},
    "3dgs+diffusion": {"use_encoder": False, "use_spectral_loss": False, "use_diffusion": True},
    "full": {"use_encoder": True, "use_spectral_loss": True, "use_diffusion": True},
}


@dataclass
class TrainConfig:
    iterations: int = 5000
    init_gaussians: int = 256

    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_encoder: float = 1e-3
    lr_denoiser: float = 2e-4

    w1: float = 0.8
    w2: float = 0.2
    w3: float = 0.05
    w4: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    densify_from: int = 500
    densify_until: int | None = None  # default: 60% of iterations
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    prune_scale_fraction: float = 1.0
    max_gaussians: int = 20000

    use_encoder: bool = True
    use_spectral_loss: bool = True
    use_diffusion: bool = True
    route_l1_through_denoised: bool = False
    train_on_noisy: bool = False
    train_fraction: float = 0.9

    encoder_frequencies: int = 6
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])

    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoise_steps: int = 50
    denoiser_width: int = 32

    log_interval: int = 50
    eval_interval: int = 1000
    checkpoint_interval: int = 1000

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.init_gaussians < 1:
            raise ValueError(f"init_gaussians must be >= 1, got {self.init_gaussians}")
        for name in ("densify_interval", "densify_grad_threshold", "prune_opacity",
                     "percent_dense", "prune_scale_fraction", "max_gaussians",
                     "log_interval", "eval_interval", "checkpoint_interval",
                     "encoder_frequencies", "diffusion_steps", "denoise_steps", "denoiser_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_means", "lr_means_final", "lr_rotations", "lr_scales",
                     "lr_opacities", "lr_sh", "lr_encoder", "lr_denoiser",
                     "w1", "w2", "w3", "w4", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.densify_from <= self.iterations:
            raise ValueError(f"densify_from {self.densify_from} outside [0, {self.iterations}]")
        if self.densify_until is not None and not self.densify_from <= self.densify_until <= self.iterations:
            raise ValueError(
                f"densify_until {self.densify_until} outside [{self.densify_from}, {self.iterations}]"
            )
        if self.denoise_steps > self.diffusion_steps:
            raise ValueError(
                f"denoise_steps {self.denoise_steps} exceeds diffusion_steps {self.diffusion_steps}"
            )
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not self.encoder_hidden or any(h < 1 for h in self.encoder_hidden):
            raise ValueError(f"encoder_hidden must list positive widths, got {self.encoder_hidden}")

    @property
    def densify_stop(self) -> int:
        if self.densify_until is not None:
            return self.densify_until
        return max(self.densify_from, int(0.6 * self.iterations))


@dataclass
class SceneSpec:
    materials: int = 4
    scene_gaussians: int = 64
    bands: int = 8
    wavelength_min: float = 400.0
    wavelength_max: float = 1100.0
    views: int = 24
    width: int = 64
    height: int = 64
    focal: float = 80.0
    orbit_radius: float = 4.0
    orbit_elevation_deg: float = 25.0
    scene_radius: float = 1.0
    noise_std: float = 0.02
    noise_edge_boost: float = 2.0  # std multiplier reached at the outermost bands
    gain_jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.bands < 3:
            raise ValueError(f"bands must be >= 3, got {self.bands}")
        if self.views < 2:
            raise ValueError(f"views must be >= 2, got {self.views}")
        if self.noise_std < 0 or self.gain_jitter < 0 or self.noise_edge_boost < 0:
            raise ValueError("noise_std, noise_edge_boost and gain_jitter must be >= 0")
        if self.materials < 1 or self.scene_gaussians < 1:
            raise ValueError("materials and scene_gaussians must be >= 1")
        if not self.wavelength_min < self.wavelength_max:
            raise ValueError(
                f"Empty wavelength range [{self.wavelength_min}, {self.wavelength_max}]"
            )
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("width, height and focal must be positive")

    def wavelengths(self) -> torch.Tensor:
        return torch.linspace(self.wavelength_min, self.wavelength_max, self.bands, dtype=torch.float32)


@dataclass
class Config:
    train: TrainConfig
    scene: SceneSpec
    seed: int = 0

    def as_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, **asdict(self.train), **asdict(self.scene)}


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


_TRAIN_KEYS = _field_types(TrainConfig)
_SCENE_KEYS = _field_types(SceneSpec)


def _coerce(key: str, annotation: str, value: Any) -> Any:
    if value is None and "None" in annotation:
        return None
    try:
        if annotation.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if annotation.startswith("int"):
            if isinstance(value, bool) or int(value) != float(value):
                raise TypeError
            return int(value)
        if annotation.startswith("float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if annotation.startswith("list[int]"):
            if not isinstance(value, list):
                raise TypeError
            return [_coerce(key, "int", v) for v in value]
    except (TypeError, ValueError):
        raise ValueError(f"Invalid value for {key!r}: {value!r} (expected {annotation})") from None
    return value


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ValueError(f"Override must look like key=value, got {item!r}")
    if not raw.strip():
        return key, None
    try:
        return key, yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValueError(f"Override {key!r} has malformed value {raw!r}: {_one_line(exc)}") from exc


def from_mapping(raw: dict[str, Any]) -> Config:
    unknown = sorted(set(raw) - set(_TRAIN_KEYS) - set(_SCENE_KEYS) - {"seed"})
    if unknown:
        raise ValueError(f"Unknown config keys: {', '.join(unknown)}")

    train_kwargs = {k: _coerce(k, _TRAIN_KEYS[k], v) for k, v in raw.items() if k in _TRAIN_KEYS}
    scene_kwargs = {k: _coerce(k, _SCENE_KEYS[k], v) for k, v in raw.items() if k in _SCENE_KEYS}
    seed = _coerce("seed", "int", raw.get("seed", 0))
    return Config(train=TrainConfig(**train_kwargs), scene=SceneSpec(**scene_kwargs), seed=seed)


def _read_file(config_path: Path | None) -> dict[str, Any]:
    raw: dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path).expanduser().resolve()
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with path.open() as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ValueError(f"Config file {path} is not valid YAML: {_one_line(exc)}") from exc
        if not isinstance(loaded, dict):
            raise ValueError(f"Config file must hold a flat key: value mapping: {path}")
        for key, value in loaded.items():
            if isinstance(value, dict):
                raise ValueError(f"Config key {key!r} is nested; only flat keys are supported")
        raw.update(loaded)
    return raw


def load(
    config_path: Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    ablation: str | None = None,
) -> Config:
    """Build the effective config: defaults < file < ablation preset < --set overrides."""
    raw = _read_file(config_path)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ValueError(f"Unknown ablation {ablation!r}; choose from {', '.join(ABLATIONS)}")
        raw.update(ABLATIONS[ablation])

    for item in overrides:
        key, value = parse_override(item)
        raw[key] = value

    return from_mapping(raw)



def with_inference_overrides(
    base: Config,
    config_path: Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
) -> Config:
    """Apply file and --set values for INFERENCE_KEYS on top of a checkpoint's config.

    Other keys are fixed by the trained model: an explicit --set for one is an
    error, and file values that differ from the checkpoint are ignored with a warning.
    """
    from_file = _read_file(config_path)
    from_cli = dict(parse_override(item) for item in overrides)
    known = set(_TRAIN_KEYS) | set(_SCENE_KEYS) | {"seed"}
    unknown = sorted((set(from_file) | set(from_cli)) - known)
    if unknown:
        raise ValueError(f"Unknown config keys: {', '.join(unknown)}")
    fixed = sorted(set(from_cli) - INFERENCE_KEYS)
    if fixed:
        raise ValueError(
            f"Cannot override {', '.join(fixed)} for a trained checkpoint; "
            f"settable: {', '.join(sorted(INFERENCE_KEYS))}"
        )

    current = base.as_dict()
    ignored = sorted(k for k, v in from_file.items() if k not in INFERENCE_KEYS and v != current[k])
    if ignored:
        logger.warning("Ignoring config keys fixed by the checkpoint: %s", ", ".join(ignored))
    changes = {k: v for k, v in from_file.items() if k in INFERENCE_KEYS}
    changes.update(from_cli)
    return from_mapping({**current, **changes})


def dump(config: Config) -> str:
    return yaml.safe_dump(config.as_dict(), sort_keys=False)


def write_effective(config: Config, out_dir: Path) -> Path:
    path = Path(out_dir) / EFFECTIVE_CONFIG_NAME
    atomic_write_bytes(path, dump(config).encode())
    logger.debug("Wrote effective config to %s", path)
    return path


def with_train(config: Config, **changes: Any) -> Config:
    return replace(config, train=replace(config.train, **changes))


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(tag.encode()).digest()[:8]
    return (seed ^ int.from_bytes(digest, "little")) & 0xFFFF_FFFF_FFFF_FFFF


def make_generator(seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag))
    return gen


def worker_threads() -> int:
    raw = os.environ.get("DDHGS_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        count = int(raw)
    except ValueError:
        raise ValueError(f"DDHGS_THREADS must be an integer, got {raw!r}") from None
    if count < 1:
        raise ValueError(f"DDHGS_THREADS must be >= 1, got {count}")
    return count
