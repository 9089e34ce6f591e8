import logging
import math

import pytest
import torch

from ddhgs.gaussian_scene import SH_COEFFS
from ddhgs.gradcheck import check_encoder
from ddhgs.wavelength_encoder import (
    EncoderParams,
    embed,
    encoder_backward,
    encoder_from_bytes,
    encoder_to_bytes,
    init_encoder,
    lipschitz_estimate,
    offsets_for,
)

RANGE = (400.0, 1000.0)


def random_encoder(hidden=(8, 8), frequencies=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    widths = [2 * frequencies, *hidden, SH_COEFFS]
    return EncoderParams(
        frequencies,
        list(hidden),
        [0.5 * torch.randn(widths[i + 1], widths[i], generator=gen, dtype=torch.float64) for i in range(len(widths) - 1)],
        [0.1 * torch.randn(widths[i + 1], generator=gen, dtype=torch.float64) for i in range(len(widths) - 1)],
    )


def test_embed_at_range_start():
    e = embed(400.0, RANGE, 4)
    assert torch.allclose(e[:4], torch.zeros(4, dtype=torch.float64))
    assert torch.allclose(e[4:], torch.ones(4, dtype=torch.float64))


def test_embed_at_range_end():
    e = embed(1000.0, RANGE, 4)
    assert abs(float(e[0])) < 1e-12
    assert float(e[4]) == pytest.approx(-1.0)


def test_embed_midpoint_second_frequency():
    e = embed(700.0, RANGE, 3)
    assert abs(float(e[1])) < 1e-12
    assert float(e[3 + 1]) == pytest.approx(-1.0)


def test_embed_clamps_out_of_range(caplog):
    with caplog.at_level(logging.WARNING):
        e = embed(1200.0, RANGE, 2)
    assert torch.allclose(e, embed(1000.0, RANGE, 2))
    assert "clamping" in caplog.text


def test_embed_rejects_empty_range():
    with pytest.raises(ValueError):
        embed(500.0, (500.0, 500.0), 2)


def test_zero_final_layer_gives_zero_offsets():
    params = init_encoder(6, [64, 64], torch.Generator().manual_seed(0))
    offsets = offsets_for(params, torch.linspace(400, 1000, 7), RANGE)
    assert offsets.shape == (7, SH_COEFFS)
    assert torch.count_nonzero(offsets) == 0


def test_equal_wavelengths_equal_rows():
    offsets = offsets_for(random_encoder(), torch.tensor([550.0, 550.0, 700.0]), RANGE)
    assert torch.equal(offsets[0], offsets[1])


def test_hand_computed_single_hidden_layer():
    frequencies = 1
    w0 = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    b0 = torch.zeros(2, dtype=torch.float64)
    w1 = torch.zeros(SH_COEFFS, 2, dtype=torch.float64)
    w1[0, 0], w1[1, 1] = 1.0, 2.0
    b1 = torch.zeros(SH_COEFFS, dtype=torch.float64)
    b1[2] = 0.5
    params = EncoderParams(frequencies, [2], [w0, w1], [b0, b1])
    out = offsets_for(params, torch.tensor([400.0, 550.0], dtype=torch.float64), RANGE)

    def softplus(v):
        return math.log1p(math.exp(v))

    for row, lam in enumerate((400.0, 550.0)):
        norm = (lam - RANGE[0]) / (RANGE[1] - RANGE[0])
        s, c = math.sin(math.pi * norm), math.cos(math.pi * norm)
        assert float(out[row, 0]) == pytest.approx(softplus(s))
        assert float(out[row, 1]) == pytest.approx(2 * softplus(c))
        assert float(out[row, 2]) == pytest.approx(0.5)


def test_shape_mismatch_rejected():
    params = random_encoder()
    with pytest.raises(ValueError):
        EncoderParams(6, [8], params.weights, params.biases)


def test_backward_zero_upstream():
    params = random_encoder()
    grads = encoder_backward(params, torch.linspace(400, 1000, 4), RANGE, torch.zeros(4, SH_COEFFS, dtype=torch.float64))
    assert all(torch.count_nonzero(g) == 0 for g in grads.parameters())


def test_final_bias_gradient_is_column_sum():
    params = random_encoder()
    upstream = torch.randn(5, SH_COEFFS, dtype=torch.float64)
    grads = encoder_backward(params, torch.linspace(400, 1000, 5), RANGE, upstream)
    assert torch.allclose(grads.biases[-1], upstream.sum(0))


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_finite_differences(seed):
    for result in check_encoder(seed):
        assert result.passed, result


def test_offsets_smooth_in_wavelength():
    params = random_encoder(seed=3)
    lams = torch.linspace(410, 990, 30, dtype=torch.float64)
    a = offsets_for(params, lams, RANGE)
    b = offsets_for(params, lams + 1.0, RANGE)
    step = (embed(lams + 1.0, RANGE, 6) - embed(lams, RANGE, 6)).norm(dim=-1)
    assert bool(((a - b).norm(dim=-1) <= lipschitz_estimate(params) * step + 1e-12).all())


def test_bytes_roundtrip():
    params = init_encoder(4, [16], torch.Generator().manual_seed(2))
    back = encoder_from_bytes(encoder_to_bytes(params))
    assert back.hidden_sizes == [16]
    assert all(torch.equal(a, b) for a, b in zip(back.parameters(), params.parameters()))
