from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml
from torch import nn

from . import config as cfg
from .checkpoint import Checkpoint, optimizer_from_tensors, optimizer_to_tensors, save_checkpoint
from .config import Config, make_generator
from .diffusion_denoiser import (
    DenoiserNet,
    NoiseSchedule,
    build_denoiser,
    cond_gradient,
    denoise,
    denoised_estimate,
    diffusion_loss,
    make_schedule,
)
from .evalkit import MetricTable, compare, mean_table, write_metrics_csv, write_timing_csv
from .gaussian_scene import CameraView, GaussianCloud, SH_COEFFS, inverse_sigmoid, quaternion_to_rotation, rgb_to_sh_dc
from .hypercube import HyperCube
from .losses import (
    LOSS_CSV_HEADER,
    LossReport,
    LossWeights,
    first_non_finite,
    l1_loss,
    make_report,
    spectral_loss,
    spectral_terms,
    ssim_loss,
    total_loss,
)
from .rasterizer import DensifyStats, accumulate_screen_gradients, render, render_backward
from .status import StatusTracker
from .synthgen import Dataset
from .wavelength_encoder import EncoderParams, encoder_backward, init_encoder, offsets_for

logger = logging.getLogger(__name__)

GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "sh")
INIT_OPACITY = 0.1
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6

LOSSES_NAME = "losses.csv"
METRICS_NAME = "metrics.csv"
TIMING_NAME = "timing.csv"
CHECKPOINT_NAME = "checkpoint.ddhg"


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, step: int, view_id: int, report: LossReport | None = None):
        self.component = component
        self.step = step
        self.view_id = view_id
        self.report = report
        detail = "" if report is None else f"; components {report.components()}, total {report.total}"
        super().__init__(f"Non-finite {component} at step {step} on view {view_id}{detail}")


@dataclass(frozen=True)
class DensifySummary:
    cloned: int
    split: int
    pruned: int
    total: int


@dataclass
class EvalResult:
    rows: list[tuple[str, str, MetricTable]]
    means: dict[str, MetricTable]
    renders: dict[tuple[int, str], HyperCube] = field(default_factory=dict)


def scene_extent(cameras: list[CameraView]) -> float:
    """1.1 x the largest camera distance from the mean camera center."""
    centers = torch.stack([cam.center.to(torch.float64) for cam in cameras])
    radius = float((centers - centers.mean(0)).norm(dim=-1).max())
    return 1.1 * radius if radius > 0 else 1.0


def _nn_log_scale(means: torch.Tensor, fallback: float) -> torch.Tensor:
    count = means.shape[0]
    if count == 1:
        return torch.full((1, 3), math.log(fallback), dtype=torch.float32)
    pts = means.to(torch.float64)
    d2 = torch.cdist(pts, pts) ** 2
    d2.fill_diagonal_(math.inf)
    k = min(3, count - 1)
    nearest = torch.topk(d2, k, dim=1, largest=False).values
    dist = torch.sqrt(nearest.mean(1)).clamp_min(1e-7)
    return torch.log(dist)[:, None].expand(count, 3).float().contiguous()


def init_cloud(
    points: torch.Tensor | None,
    bounds: tuple[list[float], list[float]],
    count: int,
    generator: torch.Generator,
    wavelengths: torch.Tensor,
    spectra: torch.Tensor | None = None,
    mean_spectrum: torch.Tensor | None = None,
) -> GaussianCloud:
    """Initial cloud: given points (or uniform in bounds), isotropic nearest-neighbour
    scales, opacity 0.1, DC radiance from per-point or mean spectra, no view dependence."""
    wl = torch.as_tensor(wavelengths, dtype=torch.float32).reshape(-1)
    lo = torch.as_tensor(bounds[0], dtype=torch.float64)
    hi = torch.as_tensor(bounds[1], dtype=torch.float64)
    if points is not None:
        means = torch.as_tensor(points, dtype=torch.float32).reshape(-1, 3).clone()
        if means.shape[0] == 0:
            raise ValueError("init_cloud received an empty point set")
    else:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if not bool((hi > lo).all()):
            raise ValueError(f"Empty bounds {bounds[0]} .. {bounds[1]}")
        means = (lo + (hi - lo) * torch.rand(count, 3, generator=generator, dtype=torch.float64)).float()

    g, n = means.shape[0], wl.shape[0]
    diag = float((hi - lo).norm()) if bool((hi > lo).all()) else 1.0
    rotations = torch.zeros(g, 4, dtype=torch.float32)
    rotations[:, 0] = 1

    if spectra is not None:
        base = torch.as_tensor(spectra, dtype=torch.float32).reshape(g, n)
    elif mean_spectrum is not None:
        base = torch.as_tensor(mean_spectrum, dtype=torch.float32).reshape(1, n).expand(g, n)
    else:
        base = torch.full((g, n), 0.5, dtype=torch.float32)
    sh = torch.zeros(g, n, SH_COEFFS, dtype=torch.float32)
    sh[:, :, 0] = rgb_to_sh_dc(base)

    return GaussianCloud(
        means=means,
        rotations=rotations,
        log_scales=_nn_log_scale(means, 0.01 * diag),
        opacity_logits=torch.full((g,), float(inverse_sigmoid(INIT_OPACITY)), dtype=torch.float32),
        sh=sh,
        wavelengths=wl,
    )


@dataclass
class TrainedModel:
    """Everything needed to render and refine views outside the training loop."""

    config: Config
    cloud: GaussianCloud
    encoder: EncoderParams | None
    denoiser: DenoiserNet | None
    schedule: NoiseSchedule

    @property
    def wl_range(self) -> tuple[float, float]:
        return float(self.cloud.wavelengths[0]), float(self.cloud.wavelengths[-1])

    @torch.no_grad()
    def offsets(self) -> torch.Tensor | None:
        if self.encoder is None:
            return None
        return offsets_for(self.encoder, self.cloud.wavelengths, self.wl_range).detach()

    @torch.no_grad()
    def render(self, cam: CameraView) -> HyperCube:
        return render(self.cloud, cam, self.offsets()).cube

    def denoise(self, cube: HyperCube, tag: str, num_steps: int | None = None) -> HyperCube:
        if self.denoiser is None:
            raise ValueError("This model was trained without the diffusion denoiser")
        steps = self.config.train.denoise_steps if num_steps is None else num_steps
        generator = make_generator(self.config.seed, f"trainer.eval.{tag}")
        return denoise(self.denoiser, cube, self.schedule, generator, steps)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> TrainedModel:
        config = cfg.from_mapping(yaml.safe_load(ckpt.config_yaml))
        tc = config.train
        net = None
        if ckpt.denoiser is not None:
            net = DenoiserNet(ckpt.cloud.bands, width=tc.denoiser_width)
            net.load_state_dict(ckpt.denoiser)
            net.eval()
        schedule = make_schedule(tc.diffusion_steps, tc.beta_start, tc.beta_end)
        return cls(config, ckpt.cloud, ckpt.encoder, net, schedule)


def evaluate_model(
    model: TrainedModel,
    dataset: Dataset,
    view_ids: list[int],
) -> EvalResult:
    """Raw and (when available) denoised metrics per held-out view, plus per-variant means."""
    if not view_ids:
        raise ValueError("Evaluation needs at least one holdout view")
    rows: list[tuple[str, str, MetricTable]] = []
    per_variant: dict[str, list[MetricTable]] = {}
    renders: dict[tuple[int, str], HyperCube] = {}
    for view_id in view_ids:
        idx = dataset.index_of(view_id)
        cam, gt = dataset.cameras[idx], dataset.clean[idx]
        start = time.perf_counter()
        raw = model.render(cam)
        elapsed = time.perf_counter() - start
        renders[view_id, "raw"] = raw
        tables = [("raw", compare(raw, gt, fps=1.0 / elapsed if elapsed > 0 else math.inf))]
        if model.denoiser is not None:
            refined = model.denoise(raw, f"{view_id:04d}")
            renders[view_id, "denoised"] = refined
            tables.append(("denoised", compare(refined, gt)))
        for variant, table in tables:
            rows.append((f"{view_id:04d}", variant, table))
            per_variant.setdefault(variant, []).append(table)
    means = {variant: mean_table(tables) for variant, tables in per_variant.items()}
    for variant, table in means.items():
        rows.append(("mean", variant, table))
        logger.info(
            "Eval %-8s PSNR %.3f  SSIM %.4f  SAM %.5f  RMSE %.5f",
            variant, table.psnr, table.ssim, table.sam, table.rmse,
        )
    return EvalResult(rows, means, renders)


def write_eval(result: EvalResult, out_dir: Path) -> None:
    write_metrics_csv(result.rows, Path(out_dir) / METRICS_NAME)
    write_timing_csv(
        [(view, table.fps) for view, variant, table in result.rows if variant == "raw" and table.fps is not None],
        Path(out_dir) / TIMING_NAME,
    )


class Trainer:
    def __init__(
        self,
        config: Config,
        dataset: Dataset,
        train_ids: list[int],
        test_ids: list[int] | tuple[int, ...] = (),
        *,
        out_dir: Path | None = None,
        status: StatusTracker | None = None,
        cloud: GaussianCloud | None = None,
    ):
        torch.use_deterministic_algorithms(True, warn_only=True)
        if not train_ids:
            raise ValueError("Trainer needs at least one training view")
        self._config = config
        self._dataset = dataset
        self._train_ids = list(train_ids)
        self._test_ids = list(test_ids)
        self._out_dir = Path(out_dir) if out_dir is not None else None
        self._status = status

        tc = config.train
        self._wavelengths = dataset.wavelengths.to(torch.float32)
        self._wl_range = (float(self._wavelengths[0]), float(self._wavelengths[-1]))
        self._weights = LossWeights(
            w1=tc.w1,
            w2=tc.w2,
            w3=tc.w3 if tc.use_spectral_loss else 0.0,
            w4=tc.w4 if tc.use_diffusion else 0.0,
            alpha=tc.alpha,
            beta=tc.beta,
        )
        self._extent = scene_extent(dataset.cameras)

        seed = config.seed
        self._gen_order = make_generator(seed, "trainer.order")
        self._gen_diffusion = make_generator(seed, "trainer.diffusion")
        self._gen_densify = make_generator(seed, "trainer.densify")

        if cloud is None:
            cloud = init_cloud(
                None,
                dataset.bounds,
                tc.init_gaussians,
                make_generator(seed, "trainer.init"),
                self._wavelengths,
                mean_spectrum=self._mean_spectrum(),
            )
        self._params = {name: nn.Parameter(getattr(cloud, name).detach().clone().float()) for name in GROUPS}
        self._gauss_opt = torch.optim.Adam(self._param_groups(), betas=(0.9, 0.999))

        self._encoder: EncoderParams | None = None
        self._encoder_opt: torch.optim.Optimizer | None = None
        if tc.use_encoder:
            enc = init_encoder(tc.encoder_frequencies, tc.encoder_hidden, make_generator(seed, "trainer.encoder"))
            self._encoder = EncoderParams(
                enc.num_frequencies,
                enc.hidden_sizes,
                [nn.Parameter(w) for w in enc.weights],
                [nn.Parameter(b) for b in enc.biases],
            )
            self._encoder_opt = torch.optim.Adam(self._encoder.parameters(), lr=tc.lr_encoder, eps=1e-8)

        self._schedule = make_schedule(tc.diffusion_steps, tc.beta_start, tc.beta_end)
        self._denoiser: DenoiserNet | None = None
        self._denoiser_opt: torch.optim.Optimizer | None = None
        if tc.use_diffusion:
            self._denoiser = build_denoiser(len(self._wavelengths), tc.denoiser_width, make_generator(seed, "trainer.denoiser"))
            self._denoiser_opt = torch.optim.Adam(self._denoiser.parameters(), lr=tc.lr_denoiser, eps=1e-8)
        elif tc.route_l1_through_denoised:
            logger.warning("route_l1_through_denoised ignored: diffusion is disabled")

        self._stats = DensifyStats.zeros(len(cloud))
        self._iteration = 0
        self._permutation: list[int] = []
        self._cursor = 0

    # ------------------------------------------------------------------
    # State accessors
    # ------------------------------------------------------------------

    @property
    def iteration(self) -> int:
        return self._iteration

    @property
    def extent(self) -> float:
        return self._extent

    @property
    def weights(self) -> LossWeights:
        return self._weights

    @property
    def stats(self) -> DensifyStats:
        return self._stats

    @property
    def cloud(self) -> GaussianCloud:
        return GaussianCloud(
            **{name: p.detach() for name, p in self._params.items()},
            wavelengths=self._wavelengths,
        )

    def model(self) -> TrainedModel:
        return TrainedModel(self._config, self.cloud.detached(), self._encoder, self._denoiser, self._schedule)

    def _param_groups(self) -> list[dict]:
        tc = self._config.train
        lrs = {
            "means": tc.lr_means * self._extent,
            "rotations": tc.lr_rotations,
            "log_scales": tc.lr_scales,
            "opacity_logits": tc.lr_opacities,
            "sh": tc.lr_sh,
        }
        return [
            {"params": [self._params[name]], "lr": lrs[name], "eps": 1e-15 if name == "means" else 1e-8, "name": name}
            for name in GROUPS
        ]

    def _target(self, idx: int) -> torch.Tensor:
        """Training target for dataset index ``idx``, clamped to [0, 1]."""
        cube = self._dataset.targets(self._config.train.train_on_noisy)[idx]
        return torch.clamp(cube.data.to(torch.float32), 0.0, 1.0)

    def _mean_spectrum(self) -> torch.Tensor:
        pixels = torch.cat(
            [self._target(self._dataset.index_of(v)).reshape(-1, len(self._wavelengths)) for v in self._train_ids]
        ).to(torch.float64)
        lit = pixels[pixels.sum(-1) > 0]
        if lit.shape[0] == 0:
            return torch.full((len(self._wavelengths),), 0.5)
        return lit.mean(0).float()

    def _next_view(self) -> int:
        if self._cursor >= len(self._permutation):
            order = torch.randperm(len(self._train_ids), generator=self._gen_order).tolist()
            self._permutation = [self._train_ids[i] for i in order]
            self._cursor = 0
        view_id = self._permutation[self._cursor]
        self._cursor += 1
        return view_id

    def means_lr(self, step: int) -> float:
        """Exponential decay from lr_means to lr_means_final, scaled by the scene extent."""
        tc = self._config.train
        ratio = min(max(step / tc.iterations, 0.0), 1.0)
        if tc.lr_means <= 0 or tc.lr_means_final <= 0:
            lr = (1 - ratio) * tc.lr_means + ratio * tc.lr_means_final
        else:
            lr = math.exp((1 - ratio) * math.log(tc.lr_means) + ratio * math.log(tc.lr_means_final))
        return lr * self._extent

    # ------------------------------------------------------------------
    # Optimisation
    # ------------------------------------------------------------------

    def train_step(self, view_id: int | None = None) -> LossReport:
        tc = self._config.train
        view_id = self._next_view() if view_id is None else view_id
        idx = self._dataset.index_of(view_id)
        cam = self._dataset.cameras[idx]
        target = self._target(idx)

        with torch.no_grad():
            offsets = None
            if self._encoder is not None:
                offsets = offsets_for(self._encoder, self._wavelengths, self._wl_range).detach()
            cloud = self.cloud
            view = render(cloud, cam, offsets)
            pred = view.cube.data

            diff_term = None
            if self._denoiser is not None:
                self._denoiser_opt.zero_grad()
                diff_term = diffusion_loss(self._denoiser, target, pred, self._schedule, self._gen_diffusion)

            if tc.route_l1_through_denoised and diff_term is not None:
                report, d_render = self._routed_objective(pred, target, diff_term)
            else:
                report, d_render = total_loss(pred, target, diff_term, self._weights)

            bad = first_non_finite(report)
            if bad is None and not bool(torch.isfinite(d_render).all()):
                bad = "gradient"
            if bad is not None:
                logger.error("Non-finite %s at step %d, view %d: %s", bad, self._iteration + 1, view_id, report)
                raise NonFiniteLossError(bad, self._iteration + 1, view_id, report)

            grads = render_backward(cloud, cam, offsets, d_render)
            if self._iteration < tc.densify_stop:
                accumulate_screen_gradients(view, grads, self._stats)

            for name in GROUPS:
                self._params[name].grad = getattr(grads, f"d_{name}").to(torch.float32)
            if self._encoder is not None:
                enc_grads = encoder_backward(self._encoder, self._wavelengths, self._wl_range, grads.d_offsets)
                for param, grad in zip(self._encoder.parameters(), enc_grads.parameters()):
                    param.grad = grad.to(torch.float32)

            self._gauss_opt.param_groups[0]["lr"] = self.means_lr(self._iteration)
            self._gauss_opt.step()
            self._gauss_opt.zero_grad()
            if self._encoder_opt is not None:
                self._encoder_opt.step()
                self._encoder_opt.zero_grad()
            if self._denoiser_opt is not None:
                self._denoiser_opt.step()
                self._denoiser_opt.zero_grad()

            rotations = self._params["rotations"]
            rotations.data.div_(rotations.data.norm(dim=-1, keepdim=True))

        self._iteration += 1
        logger.debug("Step %d view %d total %.6f", self._iteration, view_id, report.total)

        if (
            self._iteration > tc.densify_from
            and self._iteration < tc.densify_stop
            and self._iteration % tc.densify_interval == 0
        ):
            self.densify_and_prune()
        return report

    def _routed_objective(self, pred, target, diff_term) -> tuple[LossReport, torch.Tensor]:
        """L1/SSIM on the one-step denoised estimate; spectral and diffusion terms on the raw render."""
        w = self._weights
        estimate, cond = denoised_estimate(self._denoiser, target, pred, self._schedule, diff_term.t, diff_term.eps)
        l1 = l1_loss(estimate.detach(), target)
        ssim = ssim_loss(estimate.detach(), target)
        with torch.enable_grad():
            estimate.backward(w.w1 * l1.grad + w.w2 * ssim.grad)
        grad = cond_gradient(cond).to(pred.dtype)
        if w.w3:
            grad = grad + w.w3 * spectral_loss(pred, target, w.alpha, w.beta).grad
        if w.w4:
            grad = grad + w.w4 * diff_term.grad.to(pred.dtype)
        kl, cos_term = spectral_terms(pred, target)
        report = make_report(
            w,
            l1=float(l1.value),
            ssim=1.0 - float(ssim.value),
            spectral_kl=float(kl),
            spectral_cos=float(cos_term),
            diffusion=float(diff_term.value),
        )
        return report, grad

    # ------------------------------------------------------------------
    # Adaptive density control
    # ------------------------------------------------------------------

    def _cat_to_optimizer(self, extension: dict[str, torch.Tensor]) -> None:
        for group in self._gauss_opt.param_groups:
            name = group["name"]
            old = group["params"][0]
            stored = self._gauss_opt.state.pop(old, None)
            new = nn.Parameter(torch.cat([old.detach(), extension[name]], dim=0).contiguous())
            if stored:
                stored["exp_avg"] = torch.cat([stored["exp_avg"], torch.zeros_like(extension[name])], dim=0)
                stored["exp_avg_sq"] = torch.cat([stored["exp_avg_sq"], torch.zeros_like(extension[name])], dim=0)
                self._gauss_opt.state[new] = stored
            group["params"][0] = new
            self._params[name] = new

    def _prune_optimizer(self, keep: torch.Tensor) -> None:
        for group in self._gauss_opt.param_groups:
            name = group["name"]
            old = group["params"][0]
            stored = self._gauss_opt.state.pop(old, None)
            new = nn.Parameter(old.detach()[keep].contiguous())
            if stored:
                stored["exp_avg"] = stored["exp_avg"][keep].contiguous()
                stored["exp_avg_sq"] = stored["exp_avg_sq"][keep].contiguous()
                self._gauss_opt.state[new] = stored
            group["params"][0] = new
            self._params[name] = new

    def densify_and_prune(self) -> DensifySummary:
        tc = self._config.train
        p = self._params
        with torch.no_grad():
            count = p["means"].shape[0]
            grads = self._stats.mean_grad()
            scales = p["log_scales"].detach().exp()
            max_scale = scales.max(-1).values
            candidates = grads >= tc.densify_grad_threshold
            small = max_scale <= tc.percent_dense * self._extent

            room = max(tc.max_gaussians - count, 0)
            chosen = torch.nonzero(candidates).squeeze(1)
            if chosen.numel() > room:
                ranked = torch.sort(grads[chosen], descending=True, stable=True).indices
                chosen = torch.sort(chosen[ranked[:room]]).values
                logger.info("Densify capped at max_gaussians=%d (%d candidates)", tc.max_gaussians, int(candidates.sum()))
            clone_idx = chosen[small[chosen]]
            split_idx = chosen[~small[chosen]]

            extension = {name: p[name].detach()[clone_idx] for name in GROUPS}
            if split_idx.numel():
                rot = quaternion_to_rotation(p["rotations"].detach()[split_idx])
                std = scales[split_idx]
                samples = torch.randn(SPLIT_CHILDREN, split_idx.numel(), 3, generator=self._gen_densify) * std
                child_means = (rot @ samples[..., None]).squeeze(-1) + p["means"].detach()[split_idx]
                children = {
                    "means": child_means.reshape(-1, 3),
                    "log_scales": torch.log(std / SPLIT_SCALE_DIVISOR).repeat(SPLIT_CHILDREN, 1),
                }
                for name in ("rotations", "opacity_logits", "sh"):
                    rows = p[name].detach()[split_idx]
                    children[name] = rows.repeat(SPLIT_CHILDREN, *([1] * (rows.dim() - 1)))
                extension = {name: torch.cat([extension[name], children[name]], dim=0) for name in GROUPS}
            self._cat_to_optimizer(extension)

            total = self._params["means"].shape[0]
            split_origin = torch.zeros(total, dtype=torch.bool)
            split_origin[split_idx] = True
            opacity = torch.sigmoid(self._params["opacity_logits"].detach())
            oversized = self._params["log_scales"].detach().exp().max(-1).values > self._extent * tc.prune_scale_fraction
            dropped = (opacity < tc.prune_opacity) | oversized
            prune = split_origin | dropped
            if bool(prune.all()):
                survivor = int(torch.argmax(opacity))
                prune[survivor] = False
                logger.warning("Prune would empty the cloud; keeping Gaussian %d", survivor)
            self._prune_optimizer(~prune)
            self._stats = DensifyStats.zeros(self._params["means"].shape[0])

        summary = DensifySummary(
            cloned=int(clone_idx.numel()),
            split=int(split_idx.numel()),
            pruned=int((prune & ~split_origin).sum()),
            total=int(self._params["means"].shape[0]),
        )
        logger.info(
            "Densify at step %d: cloned %d, split %d, pruned %d -> %d Gaussians",
            self._iteration, summary.cloned, summary.split, summary.pruned, summary.total,
        )
        if self._status:
            self._status.set_densifying(self._iteration, summary.total, asdict(summary))
        return summary

    # ------------------------------------------------------------------
    # Evaluation, checkpoints, loop
    # ------------------------------------------------------------------

    def evaluate(self, view_ids: list[int] | None = None) -> EvalResult:
        view_ids = self._test_ids if view_ids is None else list(view_ids)
        if self._status:
            self._status.set_evaluating(self._iteration)
        with torch.no_grad():
            result = evaluate_model(self.model(), self._dataset, view_ids)
        if self._out_dir is not None:
            write_eval(result, self._out_dir)
        if self._status:
            self._status.set_eval_result(
                {variant: {k: v for k, v in asdict(t).items() if k != "fps"} for variant, t in result.means.items()}
            )
        return result

    def checkpoint(self) -> Checkpoint:
        optimizer = optimizer_to_tensors(self._gauss_opt, "gauss")
        if self._encoder_opt is not None:
            optimizer.update(optimizer_to_tensors(self._encoder_opt, "encoder"))
        if self._denoiser_opt is not None:
            optimizer.update(optimizer_to_tensors(self._denoiser_opt, "denoiser"))
        encoder = None
        if self._encoder is not None:
            encoder = EncoderParams(
                self._encoder.num_frequencies,
                list(self._encoder.hidden_sizes),
                [w.detach().clone() for w in self._encoder.weights],
                [b.detach().clone() for b in self._encoder.biases],
            )
        denoiser = None
        if self._denoiser is not None:
            denoiser = {k: v.detach().clone() for k, v in self._denoiser.state_dict().items()}
        return Checkpoint(
            iteration=self._iteration,
            config_yaml=cfg.dump(self._config),
            cloud=self.cloud.detached(),
            encoder=encoder,
            denoiser=denoiser,
            optimizer=optimizer,
            rng={
                "order": self._gen_order.get_state(),
                "diffusion": self._gen_diffusion.get_state(),
                "densify": self._gen_densify.get_state(),
            },
            stats={
                "grad_accum": self._stats.grad_accum.clone(),
                "denom": self._stats.denom.clone(),
                "permutation": torch.tensor(self._permutation, dtype=torch.int64),
                "cursor": torch.tensor(self._cursor, dtype=torch.int64),
            },
        )

    @classmethod
    def from_checkpoint(
        cls,
        ckpt: Checkpoint,
        dataset: Dataset,
        train_ids: list[int],
        test_ids: list[int] | tuple[int, ...] = (),
        *,
        out_dir: Path | None = None,
        status: StatusTracker | None = None,
        config: Config | None = None,
    ) -> Trainer:
        config = config or cfg.from_mapping(yaml.safe_load(ckpt.config_yaml))
        trainer = cls(config, dataset, train_ids, test_ids, out_dir=out_dir, status=status, cloud=ckpt.cloud)
        trainer._restore(ckpt)
        return trainer

    def _restore(self, ckpt: Checkpoint) -> None:
        if (ckpt.encoder is None) != (self._encoder is None):
            raise ValueError("Checkpoint encoder presence does not match use_encoder")
        if (ckpt.denoiser is None) != (self._denoiser is None):
            raise ValueError("Checkpoint denoiser presence does not match use_diffusion")
        with torch.no_grad():
            if self._encoder is not None:
                for param, saved in zip(self._encoder.parameters(), ckpt.encoder.parameters()):
                    param.copy_(saved)
        if self._denoiser is not None:
            self._denoiser.load_state_dict(ckpt.denoiser)
        optimizer_from_tensors(self._gauss_opt, ckpt.optimizer, "gauss")
        if self._encoder_opt is not None:
            optimizer_from_tensors(self._encoder_opt, ckpt.optimizer, "encoder")
        if self._denoiser_opt is not None:
            optimizer_from_tensors(self._denoiser_opt, ckpt.optimizer, "denoiser")
        self._gen_order.set_state(ckpt.rng["order"])
        self._gen_diffusion.set_state(ckpt.rng["diffusion"])
        self._gen_densify.set_state(ckpt.rng["densify"])
        self._stats = DensifyStats(ckpt.stats["grad_accum"].clone(), ckpt.stats["denom"].clone())
        self._permutation = [int(v) for v in ckpt.stats["permutation"].tolist()]
        self._cursor = int(ckpt.stats["cursor"])
        self._iteration = ckpt.iteration
        logger.info("Resumed training at iteration %d with %d Gaussians", self._iteration, len(self.cloud))

    def fit(self) -> list[LossReport]:
        """Run to ``iterations``, logging losses, evaluating and checkpointing on schedule."""
        tc = self._config.train
        losses_path = None
        if self._out_dir is not None:
            self._out_dir.mkdir(parents=True, exist_ok=True)
            cfg.write_effective(self._config, self._out_dir)
            losses_path = self._out_dir / LOSSES_NAME
            if self._iteration == 0 or not losses_path.exists():
                losses_path.write_text(LOSS_CSV_HEADER + "\n")
        if self._status:
            self._status.set_training(self._iteration, tc.iterations, len(self.cloud))

        logger.info(
            "Training %d -> %d iterations on %d views (%d Gaussians, encoder=%s, spectral=%s, diffusion=%s)",
            self._iteration, tc.iterations, len(self._train_ids), len(self.cloud),
            tc.use_encoder, tc.use_spectral_loss, tc.use_diffusion,
        )
        reports: list[LossReport] = []
        while self._iteration < tc.iterations:
            report = self.train_step()
            reports.append(report)
            step = self._iteration
            last = step == tc.iterations

            if step % tc.log_interval == 0 or last:
                if losses_path is not None:
                    with losses_path.open("a") as f:
                        f.write(report.csv_row(step) + "\n")
                logger.info("Step %d/%d loss %.6f (%d Gaussians)", step, tc.iterations, report.total, len(self.cloud))
                if self._status:
                    self._status.set_training(step, tc.iterations, len(self.cloud), {"total": report.total, **report.components()})

            if self._test_ids and (step % tc.eval_interval == 0 or last):
                self.evaluate()
            if self._out_dir is not None and (step % tc.checkpoint_interval == 0 or last):
                save_checkpoint(self.checkpoint(), self._out_dir / CHECKPOINT_NAME)

        if self._status:
            self._status.set_done(self._iteration, len(self.cloud))
        return reports
