from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import config as cfg
from .checkpoint import load_checkpoint
from .config import worker_threads
from .evalkit import band_range_for, compare, diff_heatmap, pseudo_rgb, save_png, write_metrics_csv
from .gradcheck import CHECKS, run_all
from .hypercube import CubeFormatError, read_cube, write_cube
from .status import STATUS_NAME, StatusTracker
from .synthgen import POSES_NAME, generate, load_dataset, read_poses, split
from .trainer import CHECKPOINT_NAME, NonFiniteLossError, Trainer, TrainedModel, evaluate_model, write_eval

logger = logging.getLogger("ddhgs")

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"
LOG_NAME = "ddhgs.log"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Flat key: value YAML config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key (repeatable, takes precedence over --config)",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (default: INFO)",
    )

    parser = argparse.ArgumentParser(
        prog="ddhgs",
        description="Hyperspectral Gaussian splatting with a jointly trained diffusion denoiser.",
    )
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = verbs.add_parser("synth", parents=[common], help="Write a synthetic multi-view hyperspectral dataset")
    p.add_argument("--out", type=Path, required=True, help="Dataset directory")

    p = verbs.add_parser("train", parents=[common], help="Train on a dataset directory")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory (poses.json + cubes)")
    p.add_argument("--out", type=Path, required=True, help="Run directory for checkpoints, CSVs and logs")
    p.add_argument("--ablation", choices=list(cfg.ABLATIONS), default=None, help="Module on/off preset")
    p.add_argument("--resume", action="store_true", help=f"Continue from <out>/{CHECKPOINT_NAME}")

    p = verbs.add_parser("render", parents=[common], help="Render one pose from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True, help=f"Pose file ({POSES_NAME})")
    p.add_argument("--view", type=int, required=True, help="View id inside the pose file")
    p.add_argument("--out", type=Path, required=True, help="Output .hsc cube")
    p.add_argument("--png", type=Path, default=None, help="Also write a pseudo-RGB preview")

    p = verbs.add_parser("denoise", parents=[common], help="Refine a rendered cube with the trained denoiser")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="Rendered .hsc cube")
    p.add_argument("--out", type=Path, required=True, help="Output .hsc cube")
    p.add_argument("--steps", type=int, default=None, help="Reverse steps (default: denoise_steps)")
    p.add_argument("--tag", default="cli", help="Noise stream tag; equal tags reproduce equal output")

    p = verbs.add_parser("eval", parents=[common], help="Metrics and error heatmaps")
    p.add_argument("--out", type=Path, required=True, help="Directory for metrics.csv and heatmaps")
    p.add_argument("--pred", type=Path, default=None, help="Predicted .hsc cube (pairwise mode)")
    p.add_argument("--gt", type=Path, default=None, help="Reference .hsc cube (pairwise mode)")
    p.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint (held-out mode)")
    p.add_argument("--data", type=Path, default=None, help="Dataset directory (held-out mode)")
    p.add_argument(
        "--band-nm",
        type=float,
        nargs=2,
        default=None,
        metavar=("LO", "HI"),
        help="Wavelength interval averaged by the heatmaps (default: all bands)",
    )

    p = verbs.add_parser("gradcheck", parents=[common], help="Run the finite-difference gradient oracles")
    p.add_argument("--only", nargs="+", choices=list(CHECKS), default=None)
    p.add_argument("--out", type=Path, default=None, help="Optional directory for the log file")
    return parser


def _log_dir(args: argparse.Namespace) -> Path | None:
    out = getattr(args, "out", None)
    if out is None:
        return None
    return out.parent if out.suffix else out


def _setup_logging(level: str, log_dir: Path | None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / LOG_NAME))
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, handlers=handlers, force=True)

    # Suppress chatty third-party loggers
    for noisy in ("PIL", "matplotlib"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def _heatmaps(pairs, band_nm, out_dir: Path) -> None:
    for name, pred, gt in pairs:
        bands = (0, gt.bands) if band_nm is None else band_range_for(gt, *band_nm)
        diff_heatmap(pred, gt, bands, out_dir / f"heatmap_{name}.png")


def _load_model(args) -> TrainedModel:
    model = TrainedModel.from_checkpoint(load_checkpoint(args.checkpoint))
    return replace(model, config=cfg.with_inference_overrides(model.config, args.config, args.overrides))


def cmd_synth(args, config: cfg.Config) -> None:
    generate(config.scene, args.out, seed=config.seed)
    cfg.write_effective(config, args.out)


def cmd_train(args, config: cfg.Config) -> None:
    dataset = load_dataset(args.data)
    train_ids, test_ids = split(dataset.view_ids, config.train.train_fraction, config.seed)
    logger.info("Split %d views into %d train / %d test", len(dataset), len(train_ids), len(test_ids))
    status = StatusTracker(args.out / STATUS_NAME)
    ckpt_path = args.out / CHECKPOINT_NAME
    if args.resume:
        trainer = Trainer.from_checkpoint(
            load_checkpoint(ckpt_path), dataset, train_ids, test_ids, out_dir=args.out, status=status, config=config
        )
    else:
        if ckpt_path.exists():
            logger.warning("Overwriting the existing run in %s (use --resume to continue it)", args.out)
        trainer = Trainer(config, dataset, train_ids, test_ids, out_dir=args.out, status=status)
    trainer.fit()


def cmd_render(args, config: cfg.Config) -> None:
    model = _load_model(args)
    ids, cameras, _ = read_poses(args.poses)
    if args.view not in ids:
        raise IndexError(f"View {args.view} not in {args.poses} (ids {ids[0]}..{ids[-1]})")
    cube = model.render(cameras[ids.index(args.view)])
    write_cube(cube, args.out)
    cfg.write_effective(model.config, args.out.parent)
    logger.info("Rendered view %d to %s", args.view, args.out)
    if args.png is not None:
        save_png(pseudo_rgb(cube), args.png)


def cmd_denoise(args, config: cfg.Config) -> None:
    model = _load_model(args)
    refined = model.denoise(read_cube(args.input), args.tag, args.steps)
    write_cube(refined, args.out)
    cfg.write_effective(model.config, args.out.parent)
    logger.info("Denoised %s to %s", args.input, args.out)


def cmd_eval(args, config: cfg.Config) -> None:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.pred is not None or args.gt is not None:
        if args.pred is None or args.gt is None:
            raise ValueError("Pairwise eval needs both --pred and --gt")
        pred, gt = read_cube(args.pred), read_cube(args.gt)
        table = compare(pred, gt)
        write_metrics_csv([(args.pred.stem, "raw", table)], out / "metrics.csv")
        cfg.write_effective(config, out)
        _heatmaps([(args.pred.stem, pred, gt)], args.band_nm, out)
        logger.info("PSNR %.3f  SSIM %.4f  SAM %.5f  RMSE %.5f", table.psnr, table.ssim, table.sam, table.rmse)
        return
    if args.checkpoint is None or args.data is None:
        raise ValueError("eval needs --pred/--gt or --checkpoint/--data")
    model = _load_model(args)
    cfg.write_effective(model.config, out)
    dataset = load_dataset(args.data)
    _, test_ids = split(dataset.view_ids, model.config.train.train_fraction, model.config.seed)
    with torch.no_grad():
        result = evaluate_model(model, dataset, test_ids)
    write_eval(result, out)
    _heatmaps(
        [
            (f"{view_id:04d}_{variant}", cube, dataset.clean[dataset.index_of(view_id)])
            for (view_id, variant), cube in result.renders.items()
        ],
        args.band_nm,
        out,
    )


def cmd_gradcheck(args, config: cfg.Config) -> None:
    if args.out is not None:
        cfg.write_effective(config, args.out)
    results = run_all(config.seed, args.only)
    print(f"{'check':<11} {'group':<24} {'rel_error':>11} {'tol':>8}  status")
    for r in results:
        print(f"{r.check:<11} {r.group:<24} {r.rel_error:>11.3e} {r.tolerance:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [f"{r.check}.{r.group}" for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"Gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level, _log_dir(args))

    try:
        torch.set_num_threads(worker_threads())
        configuration = cfg.load(args.config, args.overrides, getattr(args, "ablation", None))
        COMMANDS[args.verb](args, configuration)
    except (
        FileNotFoundError,
        ValueError,
        IndexError,
        CubeFormatError,
        NonFiniteLossError,
        RuntimeError,
        OSError,
    ) as e:
        logging.critical("%s failed: %s", args.verb, e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
