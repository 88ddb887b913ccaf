import pytest
import torch

from crysforge.gradcheck import check_gradients
from crysforge.unet import ResidualSEBlock, UnetConfig, UNet3D, unet_channels

TINY = UnetConfig(enc_channels=(4, 6), res_blocks=1, dec_channels=4, enc_kernel=3, dec_kernel=3)


def test_shapes_and_range():
    m = UNet3D(TINY)
    y = m(torch.randn(2, 1, 8, 12, 10) * 5)
    assert y.shape == (2, 8, 12, 10)
    assert y.abs().max() < 1


def test_input_channel_counts():
    assert unet_channels() == 1
    assert unet_channels(J=2) == 3
    assert unet_channels(J=2, refine=True) == 4
    m = UNet3D(UnetConfig(in_channels=4, enc_channels=(4, 6), res_blocks=1, dec_channels=4))
    assert m(torch.randn(1, 4, 8, 8, 8)).shape == (1, 8, 8, 8)
    with pytest.raises(ValueError):
        m(torch.randn(1, 3, 8, 8, 8))


def test_odd_dims_rejected():
    with pytest.raises(ValueError):
        UNet3D(TINY)(torch.randn(1, 1, 8, 9, 8))


def test_invalid_config():
    with pytest.raises(ValueError):
        UnetConfig(in_channels=0)
    with pytest.raises(ValueError):
        UnetConfig(enc_kernel=4)


def test_default_layers():
    m = UNet3D()
    assert m.enc1.weight.shape == (25, 1, 7, 7, 7)
    assert m.enc2.weight.shape == (30, 25, 7, 7, 7)
    assert len(m.blocks) == 7
    assert m.blocks[0].se.fc1.out_features == 15
    assert m.dec1.weight.shape == (25, 30, 5, 5, 5)
    assert m.dec2.weight.shape == (1, 25, 5, 5, 5)
    assert m.enc1.padding_mode == "circular" and m.dec1.padding_mode == "zeros"


def test_se_gates_open_interval():
    block = ResidualSEBlock(TINY)
    g = block.se.gates(torch.randn(3, 6, 4, 4, 4) * 10)
    assert ((g > 0) & (g < 1)).all()


def test_open_gates_reduce_to_plain_residual_block():
    block = ResidualSEBlock(TINY).eval()
    with torch.no_grad():
        block.se.fc2.weight.zero_()
        block.se.fc2.bias.fill_(50.0)
    x = torch.randn(2, 6, 4, 4, 4)
    with torch.no_grad():
        plain = torch.relu(x + block.bn2(block.conv2(torch.relu(block.bn1(block.conv1(x))))))
        assert torch.equal(block.se.gates(x), torch.ones(2, 6))
        assert torch.equal(block(x), plain)


@pytest.mark.parametrize("axis", [2, 3, 4])
def test_encoder_is_translation_equivariant(axis):
    m = UNet3D(UnetConfig(enc_channels=(4, 6), res_blocks=1, dec_channels=4)).eval()
    x = torch.randn(1, 1, 8, 10, 12)
    with torch.no_grad():
        a = torch.roll(m.encode(x), 1, dims=axis)
        b = m.encode(torch.roll(x, 1, dims=axis))
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-5)


def test_eval_mode_is_deterministic():
    m = UNet3D(TINY)
    m.train()
    m(torch.randn(4, 1, 8, 8, 8))
    m.eval()
    x = torch.randn(1, 1, 8, 8, 8)
    stats = m.enc_bn1.running_mean.clone()
    assert torch.equal(m(x), m(x))
    assert torch.equal(stats, m.enc_bn1.running_mean)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = UnetConfig(in_channels=2, enc_channels=(4, 6), res_blocks=1, dec_channels=4)
    m = UNet3D(cfg).double().eval()
    x = torch.randn(2, 2, 8, 8, 8, dtype=torch.float64)
    target = torch.tanh(torch.randn(2, 8, 8, 8, dtype=torch.float64))
    loss = lambda: ((m(x) - target) ** 2).mean()
    results = check_gradients(m, loss)
    worst = max(results, key=lambda r: r.rel_error)
    assert worst.rel_error <= 1e-4, worst
