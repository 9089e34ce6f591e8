import json
import math

import pytest
import torch

import ddhgs.trainer as trainer_module
from ddhgs import config as cfg
from ddhgs.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint
from ddhgs.gaussian_scene import SH_COEFFS, GaussianCloud, inverse_sigmoid, rgb_to_sh_dc
from ddhgs.losses import LOSS_CSV_HEADER, make_report
from ddhgs.rasterizer import render
from ddhgs.status import STATUS_NAME, StatusTracker
from ddhgs.synthgen import split
from ddhgs.trainer import (
    CHECKPOINT_NAME,
    INIT_OPACITY,
    LOSSES_NAME,
    METRICS_NAME,
    TIMING_NAME,
    NonFiniteLossError,
    Trainer,
    TrainedModel,
    init_cloud,
    scene_extent,
)


def ids(dataset, config):
    return split(dataset.view_ids, config.train.train_fraction, config.seed)


def make_trainer(config, dataset, **kwargs):
    train_ids, test_ids = ids(dataset, config)
    return Trainer(config, dataset, train_ids, test_ids, **kwargs)


def hand_cloud(wavelengths, scales, opacities, means=None):
    count = len(scales)
    bands = wavelengths.shape[0]
    sh = torch.zeros(count, bands, SH_COEFFS)
    sh[:, :, 0] = rgb_to_sh_dc(torch.full((count, bands), 0.4))
    if means is None:
        means = [[0.2 * i - 0.3, 0.0, 0.0] for i in range(count)]
    rotations = torch.zeros(count, 4)
    rotations[:, 0] = 1
    return GaussianCloud(
        means=torch.tensor(means, dtype=torch.float32),
        rotations=rotations,
        log_scales=torch.log(torch.tensor(scales, dtype=torch.float32))[:, None].repeat(1, 3),
        opacity_logits=inverse_sigmoid(torch.tensor(opacities, dtype=torch.float32)),
        sh=sh,
        wavelengths=wavelengths.to(torch.float32),
    )


def assert_clouds_equal(a: GaussianCloud, b: GaussianCloud):
    for name in ("means", "rotations", "log_scales", "opacity_logits", "sh"):
        assert torch.equal(getattr(a, name), getattr(b, name)), name


# initialisation


def test_init_cloud_uniform_in_bounds():
    wl = torch.linspace(400, 700, 4)
    cloud = init_cloud(None, ([-1, -1, -1], [1, 1, 1]), 50, torch.Generator().manual_seed(0), wl,
                       mean_spectrum=torch.tensor([0.1, 0.2, 0.3, 0.4]))
    assert len(cloud) == 50
    assert bool((cloud.means.abs() <= 1).all())
    assert torch.allclose(torch.sigmoid(cloud.opacity_logits), torch.full((50,), INIT_OPACITY))
    assert torch.equal(cloud.rotations[:, 0], torch.ones(50))
    assert torch.allclose(cloud.sh[0, :, 0], rgb_to_sh_dc(torch.tensor([0.1, 0.2, 0.3, 0.4])))
    assert torch.count_nonzero(cloud.sh[:, :, 1:]) == 0
    assert torch.equal(cloud.log_scales[:, 0], cloud.log_scales[:, 2])


def test_init_cloud_from_points_uses_neighbour_distance():
    points = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    cloud = init_cloud(points, ([-1, -1, -1], [1, 1, 1]), 0, torch.Generator(), torch.linspace(400, 700, 3))
    assert torch.equal(cloud.means, points)
    # two neighbours each: mean squared distance (1 + 4) / 2
    assert float(cloud.log_scales[0, 0]) == pytest.approx(0.5 * math.log(2.5), abs=1e-6)


def test_init_cloud_errors():
    wl = torch.linspace(400, 700, 3)
    with pytest.raises(ValueError):
        init_cloud(None, ([0, 0, 0], [0, 1, 1]), 5, torch.Generator(), wl)
    with pytest.raises(ValueError):
        init_cloud(torch.zeros(0, 3), ([-1, -1, -1], [1, 1, 1]), 5, torch.Generator(), wl)


def test_scene_extent(tiny_dataset):
    extent = scene_extent(tiny_dataset.cameras)
    assert 4.0 < extent < 1.1 * 4.0 * 2


# one step


def test_train_step_reports_finite_losses(tiny_config, tiny_dataset):
    trainer = make_trainer(tiny_config, tiny_dataset)
    report = trainer.train_step()
    assert trainer.iteration == 1
    assert all(math.isfinite(v) for v in report.components().values())
    assert report.diffusion > 0


def test_repeated_steps_reduce_loss_on_one_view(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, iterations=40, densify_from=40, lr_sh=2e-2, use_diffusion=False)
    trainer = make_trainer(config, tiny_dataset)
    view = trainer._train_ids[0]
    first = trainer.train_step(view).l1
    for _ in range(25):
        last = trainer.train_step(view).l1
    assert last < first


def test_zero_initialised_encoder_leaves_render_unchanged(tiny_config, tiny_dataset):
    model = make_trainer(tiny_config, tiny_dataset).model()
    assert torch.count_nonzero(model.offsets()) == 0
    cam = tiny_dataset.cameras[0]
    assert torch.equal(model.render(cam).data, render(model.cloud, cam).cube.data)


@pytest.mark.parametrize("ablation", ["3dgs", "3dgs+we+sl", "full"])
def test_ablation_weights(tiny_dataset, ablation):
    config = cfg.load(None, ["iterations=6", "bands=4", "views=6", "width=16", "height=16",
                             "init_gaussians=8", "denoiser_width=8", "diffusion_steps=10",
                             "denoise_steps=3", "densify_from=2"], ablation)
    trainer = make_trainer(config, tiny_dataset)
    flags = cfg.ABLATIONS[ablation]
    assert (trainer.weights.w3 > 0) == flags["use_spectral_loss"]
    assert (trainer.weights.w4 > 0) == flags["use_diffusion"]
    assert (trainer.model().encoder is not None) == flags["use_encoder"]
    trainer.train_step()


def test_routed_objective_step(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, route_l1_through_denoised=True)
    report = make_trainer(config, tiny_dataset).train_step()
    assert math.isfinite(report.total)


def test_means_lr_decays_to_final(tiny_config, tiny_dataset):
    trainer = make_trainer(tiny_config, tiny_dataset)
    tc = tiny_config.train
    assert trainer.means_lr(0) == pytest.approx(tc.lr_means * trainer.extent)
    assert trainer.means_lr(tc.iterations) == pytest.approx(tc.lr_means_final * trainer.extent)
    assert trainer.means_lr(tc.iterations // 2) < trainer.means_lr(0)


def test_non_finite_loss_raises(tiny_config, tiny_dataset, monkeypatch):
    config = cfg.with_train(tiny_config, use_diffusion=False)

    def broken(pred, gt, diffusion_term, weights):
        nan = float("nan")
        report = make_report(weights, l1=0.1, ssim=nan, spectral_kl=0.0, spectral_cos=0.0, diffusion=0.0)
        return report, torch.zeros_like(pred)

    monkeypatch.setattr(trainer_module, "total_loss", broken)
    trainer = make_trainer(config, tiny_dataset)
    view = trainer._train_ids[0]
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step(view)
    assert info.value.component == "ssim"
    assert info.value.step == 1
    assert info.value.view_id == view
    assert trainer.iteration == 0


def test_targets_are_clamped_to_unit_range(tiny_config, tiny_dataset, monkeypatch):
    config = cfg.with_train(tiny_config, use_diffusion=False, train_on_noisy=True)
    train_ids, test_ids = ids(tiny_dataset, config)
    view = train_ids[0]
    idx = tiny_dataset.index_of(view)
    bright = tiny_dataset.noisy[idx].with_data(tiny_dataset.noisy[idx].data + 0.8)
    tiny_dataset.noisy[idx] = bright
    assert float(bright.data.max()) > 1.0

    seen = []
    original = trainer_module.total_loss

    def recording(pred, gt, diffusion_term, weights):
        seen.append(gt.clone())
        return original(pred, gt, diffusion_term, weights)

    monkeypatch.setattr(trainer_module, "total_loss", recording)
    trainer = Trainer(config, tiny_dataset, train_ids, test_ids)
    pred = render(trainer.cloud, tiny_dataset.cameras[idx], trainer.model().offsets()).cube.data
    report = trainer.train_step(view)

    clamped = torch.clamp(bright.data, 0.0, 1.0)
    assert torch.equal(seen[0], clamped)
    expected, _ = original(pred, clamped, None, trainer.weights)
    assert report.total == pytest.approx(expected.total)


def test_zero_diffusion_weight_matches_no_diffusion_run(tiny_config, tiny_dataset):
    silent = make_trainer(cfg.with_train(tiny_config, w4=0.0, lr_denoiser=0.0), tiny_dataset)
    plain = make_trainer(cfg.with_train(tiny_config, use_diffusion=False), tiny_dataset)
    for _ in range(tiny_config.train.iterations):
        a = silent.train_step()
        b = plain.train_step()
        assert a.l1 == b.l1 and a.ssim == b.ssim
    assert_clouds_equal(silent.cloud, plain.cloud)


# densification


def densify_trainer(config, dataset):
    cloud = hand_cloud(
        dataset.wavelengths,
        scales=[0.01, 0.2, 0.05, 0.05],
        opacities=[0.5, 0.5, 0.001, 0.5],
    )
    trainer = make_trainer(config, dataset, cloud=cloud)
    trainer.train_step()
    trainer.stats.grad_accum[:] = torch.tensor([1.0, 1.0, 0.0, 0.0])
    trainer.stats.denom[:] = 1.0
    return trainer


def test_densify_clone_split_prune(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, use_diffusion=False, densify_from=6)
    trainer = densify_trainer(config, tiny_dataset)
    before = trainer.cloud
    summary = trainer.densify_and_prune()
    assert (summary.cloned, summary.split, summary.pruned) == (1, 1, 1)
    assert summary.total == 5
    after = trainer.cloud
    assert len(after) == 5
    # survivors keep their order: the clone source, then the untouched Gaussian
    assert torch.equal(after.means[0], before.means[0])
    assert torch.equal(after.means[1], before.means[3])
    # clone, then the two split children at reduced scale
    assert torch.equal(after.means[2], before.means[0])
    child_scale = torch.exp(after.log_scales[3:]).max(-1).values
    assert torch.allclose(child_scale, torch.full((2,), 0.2 / 1.6), rtol=2e-2)
    assert len(trainer.stats.grad_accum) == 5
    state = trainer._gauss_opt.state[trainer._gauss_opt.param_groups[0]["params"][0]]
    assert state["exp_avg"].shape[0] == 5
    assert torch.count_nonzero(state["exp_avg"][2:]) == 0


def test_densify_respects_cap(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, use_diffusion=False, densify_from=6, max_gaussians=4)
    trainer = densify_trainer(config, tiny_dataset)
    summary = trainer.densify_and_prune()
    assert (summary.cloned, summary.split) == (0, 0)
    assert summary.total == 3


def test_prune_never_empties_cloud(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, use_diffusion=False, densify_from=6)
    cloud = hand_cloud(tiny_dataset.wavelengths, scales=[0.05, 0.05], opacities=[0.001, 0.002])
    trainer = make_trainer(config, tiny_dataset, cloud=cloud)
    assert trainer.densify_and_prune().total == 1


# checkpoints and determinism


def test_resume_is_bit_exact(tiny_config, tiny_dataset):
    a = make_trainer(tiny_config, tiny_dataset)
    for _ in range(3):
        a.train_step()
    ckpt = checkpoint_from_bytes(checkpoint_to_bytes(a.checkpoint()))
    for _ in range(3):
        a.train_step()

    train_ids, test_ids = ids(tiny_dataset, tiny_config)
    b = Trainer.from_checkpoint(ckpt, tiny_dataset, train_ids, test_ids)
    assert b.iteration == 3
    for _ in range(3):
        b.train_step()
    assert_clouds_equal(a.cloud, b.cloud)
    for p, q in zip(a.model().denoiser.parameters(), b.model().denoiser.parameters()):
        assert torch.equal(p, q)


def test_two_runs_are_identical(tiny_config, tiny_dataset):
    a = make_trainer(tiny_config, tiny_dataset)
    b = make_trainer(tiny_config, tiny_dataset)
    ra = [a.train_step().total for _ in range(4)]
    rb = [b.train_step().total for _ in range(4)]
    assert ra == rb
    assert_clouds_equal(a.cloud, b.cloud)


def test_restore_rejects_mismatched_modules(tiny_config, tiny_dataset):
    ckpt = make_trainer(tiny_config, tiny_dataset).checkpoint()
    other = cfg.with_train(tiny_config, use_diffusion=False)
    train_ids, test_ids = ids(tiny_dataset, tiny_config)
    with pytest.raises(ValueError, match="denoiser"):
        Trainer.from_checkpoint(ckpt, tiny_dataset, train_ids, test_ids, config=other)


# full loop


def test_fit_writes_run_directory(tiny_config, tiny_dataset, tmp_path):
    out = tmp_path / "run"
    status = StatusTracker(out / STATUS_NAME)
    trainer = make_trainer(tiny_config, tiny_dataset, out_dir=out, status=status)
    reports = trainer.fit()
    assert len(reports) == tiny_config.train.iterations

    lines = (out / LOSSES_NAME).read_text().splitlines()
    assert lines[0] == LOSS_CSV_HEADER
    assert [line.split(",")[0] for line in lines[1:]] == ["2", "4", "6"]

    metrics = (out / METRICS_NAME).read_text().splitlines()
    assert metrics[0] == "view,variant,psnr,ssim,sam,rmse"
    variants = {line.split(",")[1] for line in metrics[1:]}
    assert variants == {"raw", "denoised"}
    assert any(line.startswith("mean,") for line in metrics)
    assert (out / TIMING_NAME).read_text().startswith("view,fps")

    ckpt = load_checkpoint(out / CHECKPOINT_NAME)
    assert ckpt.iteration == tiny_config.train.iterations
    assert (out / cfg.EFFECTIVE_CONFIG_NAME).exists()

    doc = json.loads((out / STATUS_NAME).read_text())
    assert doc["progress"]["state"] == "done"
    assert doc["progress"]["iteration"] == tiny_config.train.iterations


def test_two_fits_write_identical_files(tiny_config, tiny_dataset, tmp_path):
    for name in ("a", "b"):
        make_trainer(tiny_config, tiny_dataset, out_dir=tmp_path / name).fit()
    for name in (CHECKPOINT_NAME, METRICS_NAME, LOSSES_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_trained_model_from_checkpoint_matches(tiny_config, tiny_dataset, tmp_path):
    trainer = make_trainer(tiny_config, tiny_dataset, out_dir=tmp_path)
    trainer.fit()
    model = TrainedModel.from_checkpoint(load_checkpoint(tmp_path / CHECKPOINT_NAME))
    cam = tiny_dataset.cameras[0]
    assert torch.equal(model.render(cam).data, trainer.model().render(cam).data)
    a = model.denoise(model.render(cam), "t")
    b = trainer.model().denoise(trainer.model().render(cam), "t")
    assert torch.equal(a.data, b.data)


def test_denoise_without_denoiser(tiny_config, tiny_dataset):
    config = cfg.with_train(tiny_config, use_diffusion=False)
    model = make_trainer(config, tiny_dataset).model()
    with pytest.raises(ValueError):
        model.denoise(model.render(tiny_dataset.cameras[0]), "x")


def test_evaluate_needs_views(tiny_config, tiny_dataset):
    trainer = make_trainer(tiny_config, tiny_dataset)
    with pytest.raises(ValueError):
        trainer.evaluate([])

