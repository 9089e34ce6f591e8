import pytest
import torch

from ddhgs.gaussian_scene import SH_C0, SH_COEFFS, GaussianCloud, rgb_to_sh_dc
from ddhgs.gradcheck import check_rasterizer
from ddhgs.hypercube import HyperCube
from ddhgs.rasterizer import (
    ALPHA_MAX,
    DensifyStats,
    RenderedView,
    RenderGradients,
    accumulate_screen_gradients,
    render,
    render_backward,
)

from conftest import front_camera, single_gaussian


def stack_clouds(*clouds):
    return GaussianCloud(
        means=torch.cat([c.means for c in clouds]),
        rotations=torch.cat([c.rotations for c in clouds]),
        log_scales=torch.cat([c.log_scales for c in clouds]),
        opacity_logits=torch.cat([c.opacity_logits for c in clouds]),
        sh=torch.cat([c.sh for c in clouds]),
        wavelengths=clouds[0].wavelengths,
    )


def random_cloud(count=6, bands=3, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    sh = torch.zeros(count, bands, SH_COEFFS, dtype=dtype)
    sh[:, :, 0] = rgb_to_sh_dc(torch.rand(count, bands, generator=gen, dtype=dtype))
    sh[:, :, 1:] = 0.05 * torch.randn(count, bands, SH_COEFFS - 1, generator=gen, dtype=dtype)
    q = torch.randn(count, 4, generator=gen, dtype=dtype)
    return GaussianCloud(
        means=(torch.rand(count, 3, generator=gen, dtype=dtype) - 0.5),
        rotations=q / q.norm(dim=-1, keepdim=True),
        log_scales=torch.log(0.1 + 0.2 * torch.rand(count, 3, generator=gen, dtype=dtype)),
        opacity_logits=torch.randn(count, generator=gen, dtype=dtype) + 1.0,
        sh=sh,
        wavelengths=torch.linspace(450.0, 650.0, bands),
    )


def test_render_shape_and_background(camera):
    view = render(single_gaussian(bands=3, mean=(0.0, 0.0, 5.0)), camera)
    assert view.cube.shape == (camera.height, camera.width, 3)
    assert view.cube.data[0, 0].abs().max() == 0


def test_opaque_gaussian_at_center(camera):
    cloud = single_gaussian(bands=2, opacity_logit=12.0, value=0.6, log_scale=2.0)
    pixel = render(cloud, camera).cube.data[8, 8]
    assert torch.allclose(pixel, torch.full((2,), ALPHA_MAX * 0.6), atol=1e-5)


def test_two_coincident_gaussians(camera):
    front = single_gaussian(bands=1, opacity_logit=0.0, value=0.2, log_scale=2.0)
    back = single_gaussian(bands=1, opacity_logit=12.0, value=0.8, log_scale=2.0)
    pixel = render(stack_clouds(front, back), camera).cube.data[8, 8, 0]
    assert float(pixel) == pytest.approx(0.5 * 0.2 + 0.5 * ALPHA_MAX * 0.8, abs=1e-5)


def test_front_to_back_order(camera):
    near = single_gaussian(bands=1, opacity_logit=12.0, value=0.9, log_scale=2.0, mean=(0.0, -1.0, 0.0))
    far = single_gaussian(bands=1, opacity_logit=0.0, value=0.1, log_scale=2.0, mean=(0.0, 1.0, 0.0))
    a = render(stack_clouds(far, near), camera).cube.data[8, 8, 0]
    b = render(stack_clouds(near, far), camera).cube.data[8, 8, 0]
    assert torch.equal(a, b)
    assert float(a) == pytest.approx(ALPHA_MAX * 0.9 + (1 - ALPHA_MAX) * 0.5 * 0.1, abs=1e-4)


def test_all_behind_camera_gives_background(camera):
    cloud = single_gaussian(bands=2, mean=(0.0, -10.0, 0.0))
    view = render(cloud, camera)
    assert torch.count_nonzero(view.cube.data) == 0
    assert not bool(view.visible.any())


def test_zero_opacity_equals_background(camera):
    cloud = random_cloud()
    cloud = GaussianCloud(
        means=cloud.means,
        rotations=cloud.rotations,
        log_scales=cloud.log_scales,
        opacity_logits=torch.full_like(cloud.opacity_logits, float("-inf")),
        sh=cloud.sh,
        wavelengths=cloud.wavelengths,
    )
    assert torch.count_nonzero(render(cloud, camera).cube.data) == 0


def test_empty_cloud_rejected(camera):
    cloud = random_cloud(count=1)
    empty = GaussianCloud(
        means=cloud.means[:0],
        rotations=cloud.rotations[:0],
        log_scales=cloud.log_scales[:0],
        opacity_logits=cloud.opacity_logits[:0],
        sh=cloud.sh[:0],
        wavelengths=cloud.wavelengths,
    )
    with pytest.raises(ValueError):
        render(empty, camera)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_blend_weights_sum_to_at_most_one(camera, seed):
    cloud = random_cloud(count=12, bands=1, seed=seed)
    white = torch.zeros_like(cloud.sh)
    white[:, :, 0] = rgb_to_sh_dc(torch.ones(1))
    cloud = GaussianCloud(cloud.means, cloud.rotations, cloud.log_scales, cloud.opacity_logits, white, cloud.wavelengths)
    image = render(cloud, camera).cube.data
    assert float(image.max()) <= 1.0 + 1e-6


@pytest.mark.parametrize("order", [[2, 0, 1], [1, 2, 0], [2, 1, 0]])
def test_equal_depth_disjoint_gaussians_are_order_free(camera, order):
    cloud = stack_clouds(
        single_gaussian(bands=2, value=0.2, log_scale=-3.0, mean=(-0.9, 0.0, 0.0)),
        single_gaussian(bands=2, value=0.5, log_scale=-3.0, mean=(0.0, 0.0, 0.0)),
        single_gaussian(bands=2, value=0.8, log_scale=-3.0, mean=(0.9, 0.0, 0.5)),
    )
    perm = torch.tensor(order)
    shuffled = GaussianCloud(
        cloud.means[perm],
        cloud.rotations[perm],
        cloud.log_scales[perm],
        cloud.opacity_logits[perm],
        cloud.sh[perm],
        cloud.wavelengths,
    )
    a = render(cloud, camera).cube.data
    b = render(shuffled, camera).cube.data
    assert float(a.max()) > 0
    assert torch.allclose(a, b, atol=1e-6)


def test_band_separability(camera):
    cloud = random_cloud(bands=4)
    bumped_sh = cloud.sh.clone()
    bumped_sh[:, 2] += 0.3
    bumped = GaussianCloud(cloud.means, cloud.rotations, cloud.log_scales, cloud.opacity_logits, bumped_sh, cloud.wavelengths)
    a = render(cloud, camera).cube.data
    b = render(bumped, camera).cube.data
    for band in (0, 1, 3):
        assert torch.equal(a[..., band], b[..., band])
    assert not torch.equal(a[..., 2], b[..., 2])


def test_zero_offsets_match_plain_render(camera):
    cloud = random_cloud(bands=3)
    plain = render(cloud, camera).cube.data
    offset = render(cloud, camera, torch.zeros(3, SH_COEFFS)).cube.data
    assert torch.equal(plain, offset)


def test_tiling_matches_single_thread(camera, monkeypatch):
    cloud = random_cloud(count=8, bands=2, seed=4)
    big = front_camera(width=40, height=36, focal=40.0)
    monkeypatch.setenv("DDHGS_THREADS", "1")
    serial = render(cloud, big).cube.data
    monkeypatch.setenv("DDHGS_THREADS", "4")
    parallel = render(cloud, big).cube.data
    assert torch.equal(serial, parallel)


def test_zero_upstream_gives_zero_gradients(camera):
    cloud = random_cloud()
    grads = render_backward(cloud, camera, None, torch.zeros(camera.height, camera.width, cloud.bands))
    for name in ("d_means", "d_rotations", "d_log_scales", "d_opacity_logits", "d_sh", "d_offsets"):
        assert torch.count_nonzero(getattr(grads, name)) == 0


def test_backward_shape_mismatch(camera):
    with pytest.raises(ValueError):
        render_backward(random_cloud(), camera, None, torch.zeros(3, 3, 3))


def test_dc_gradient_of_isolated_gaussian(camera):
    cloud = single_gaussian(bands=2, opacity_logit=0.0, value=0.5, log_scale=-1.0).to(torch.float64)
    upstream = torch.zeros(camera.height, camera.width, 2, dtype=torch.float64)
    upstream[8, 8, 1] = 1.0
    grads = render_backward(cloud, camera, None, upstream)
    assert float(grads.d_sh[0, 1, 0]) == pytest.approx(0.5 * SH_C0, rel=1e-6)
    assert float(grads.d_sh[0, 0, 0]) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    for result in check_rasterizer(seed):
        assert result.passed, result


def _view(visible, width=2, height=2):
    count = visible.shape[0]
    cube = HyperCube.from_tensor(torch.zeros(height, width, 1), [500.0])
    return RenderedView(cube, torch.zeros(count, 2), torch.ones(count), visible)


def _grads(d_means2d):
    count = d_means2d.shape[0]
    z = torch.zeros(count, 3)
    return RenderGradients(z, torch.zeros(count, 4), z, torch.zeros(count), torch.zeros(count, 1, 16), torch.zeros(1, 16), d_means2d)


def test_screen_gradient_running_mean():
    stats = DensifyStats.zeros(2)
    visible = torch.tensor([True, False])
    accumulate_screen_gradients(_view(visible), _grads(torch.tensor([[0.1, 0.0], [5.0, 5.0]])), stats)
    accumulate_screen_gradients(_view(visible), _grads(torch.tensor([[0.0, 0.3], [5.0, 5.0]])), stats)
    assert float(stats.mean_grad()[0]) == pytest.approx(0.2)
    assert float(stats.mean_grad()[1]) == 0.0
    assert float(stats.denom[1]) == 0.0


def test_screen_gradient_zero():
    stats = accumulate_screen_gradients(_view(torch.tensor([True])), _grads(torch.zeros(1, 2)))
    assert float(stats.mean_grad()[0]) == 0.0
    assert float(stats.denom[0]) == 1.0
