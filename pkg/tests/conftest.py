import hypothesis
import pytest
import torch

from ddhgs.config import Config, SceneSpec, TrainConfig
from ddhgs.gaussian_scene import SH_COEFFS, CameraView, GaussianCloud, rgb_to_sh_dc
from ddhgs.hypercube import HyperCube
from ddhgs.synthgen import generate

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile("fast")


def make_cube(height=4, width=5, bands=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    data = torch.rand(height, width, bands, generator=gen)
    return HyperCube.from_tensor(data, torch.linspace(400.0, 700.0, bands))


def single_gaussian(bands=3, opacity_logit=0.0, value=0.5, log_scale=-1.5, mean=(0.0, 0.0, 0.0)):
    sh = torch.zeros(1, bands, SH_COEFFS)
    sh[:, :, 0] = rgb_to_sh_dc(torch.full((bands,), value))
    return GaussianCloud(
        means=torch.tensor([mean], dtype=torch.float32),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=torch.full((1, 3), log_scale),
        opacity_logits=torch.tensor([opacity_logit]),
        sh=sh,
        wavelengths=torch.linspace(450.0, 650.0, bands),
    )


def front_camera(width=16, height=16, focal=20.0, distance=4.0):
    return CameraView.look_at((0.0, -distance, 0.0), (0.0, 0.0, 0.0), fx=focal, fy=focal, width=width, height=height)


@pytest.fixture
def cube():
    return make_cube()


@pytest.fixture
def camera():
    return front_camera()


@pytest.fixture
def tiny_config():
    scene = SceneSpec(scene_gaussians=12, bands=4, views=6, width=16, height=16, focal=20.0)
    train = TrainConfig(
        iterations=6,
        init_gaussians=24,
        densify_from=2,
        densify_interval=2,
        encoder_hidden=[8, 8],
        diffusion_steps=10,
        denoise_steps=3,
        denoiser_width=8,
        log_interval=2,
        eval_interval=3,
        checkpoint_interval=3,
        train_fraction=0.7,
    )
    return Config(train=train, scene=scene, seed=3)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    return generate(tiny_config.scene, tmp_path / "data", seed=tiny_config.seed)
