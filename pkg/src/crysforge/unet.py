"""Convolutional baseline: encoder, residual SE blocks, decoder.

One 2x downsampling stage.  Encoder and residual convolutions wrap around
the cell (circular padding); decoder convolutions are zero padded.  Extra
input channels carry partial structures and/or a refining prior.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UnetConfig:
    in_channels: int = 1
    enc_channels: tuple[int, int] = (25, 30)
    res_blocks: int = 7
    se_reduction: int = 2
    enc_kernel: int = 7
    dec_kernel: int = 5
    dec_channels: int = 25
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.in_channels < 1 or min(self.enc_channels) < 1 or self.res_blocks < 0 or self.se_reduction < 1:
            raise ValueError(f"invalid U-Net config {self}")
        if self.enc_kernel % 2 == 0 or self.dec_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd for same padding")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnetConfig":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


def unet_channels(J: int = 0, refine: bool = False) -> int:
    return 1 + J + int(refine)


def _conv(cin, cout, k, circular: bool) -> nn.Conv3d:
    conv = nn.Conv3d(cin, cout, k, padding=k // 2, padding_mode="circular" if circular else "zeros")
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None, None]


class ResidualSEBlock(nn.Module):
    def __init__(self, cfg: UnetConfig):
        super().__init__()
        c, k = cfg.enc_channels[1], cfg.enc_kernel
        self.conv1 = _conv(c, c, k, circular=True)
        self.bn1 = nn.BatchNorm3d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.conv2 = _conv(c, c, k, circular=True)
        self.bn2 = nn.BatchNorm3d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.se = SqueezeExcite(c, cfg.se_reduction)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.se(self.bn2(self.conv2(h)))
        return F.relu(x + h)


class UNet3D(nn.Module):
    def __init__(self, cfg: UnetConfig = UnetConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.enc_channels
        bn = lambda c: nn.BatchNorm3d(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.enc1 = _conv(cfg.in_channels, c1, cfg.enc_kernel, circular=True)
        self.enc_bn1 = bn(c1)
        self.enc2 = _conv(c1, c2, cfg.enc_kernel, circular=True)
        self.enc_bn2 = bn(c2)
        self.blocks = nn.Sequential(*[ResidualSEBlock(cfg) for _ in range(cfg.res_blocks)])
        self.dec1 = _conv(c2, cfg.dec_channels, cfg.dec_kernel, circular=False)
        self.dec_bn1 = bn(cfg.dec_channels)
        self.dec2 = _conv(cfg.dec_channels, 1, cfg.dec_kernel, circular=False)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder activations before pooling, (B, c2, N1, N2, N3)."""
        x = F.relu(self.enc_bn1(self.enc1(x)))
        return F.relu(self.enc_bn2(self.enc2(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, N1, N2, N3) stacked channels to a (B, N1, N2, N3) map in (-1, 1)."""
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, N1, N2, N3) input, got {tuple(x.shape)}")
        if any(n % 2 for n in x.shape[2:]):
            raise ValueError(f"grid {tuple(x.shape[2:])} must be even along every axis")
        h = F.max_pool3d(self.encode(x), kernel_size=2, stride=2)
        h = self.blocks(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec_bn1(self.dec1(h)))
        return torch.tanh(self.dec2(h)).squeeze(1)
