"""CrysFormer: Patterson tokens attending to fixed partial-structure tokens.

Pipeline for a Patterson map ``p`` and partial structures ``u_1..u_J``::

    X0 = pos_p + MLP_p(patches(conv_p(p)))           (S tokens)
    U  = concat_j(pos_u + MLP_u(patches(conv_u(u_j))))  (S*J tokens, computed once)
    X_{l+1} = layer_l(X_l, U)                         for l < L
    out = tanh(conv_out(unpatch(MLP_dec(norm(X_L)))))

Each layer is pre-norm: attention over ``[X; U]`` keys/values with a
residual, then a ReLU feed-forward with a residual.  ``U`` is read but never
updated, so every layer sees the same partial tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    patch: tuple[int, int, int] = (4, 4, 4)
    channels: int = 4
    d_t: int = 128
    heads: int = 4
    d_h: int = 32
    layers: int = 4
    ff_mult: int = 2
    J_max: int = 4
    max_tokens: int = 1024
    in_channels: int = 1  # 2 when a refining prior is stacked onto the Patterson map

    def __post_init__(self):
        ints = [*self.patch, self.channels, self.d_t, self.heads, self.d_h, self.layers, self.ff_mult, self.max_tokens]
        if any(int(v) <= 0 for v in ints) or self.J_max < 0 or self.in_channels < 1:
            raise ValueError(f"invalid model config {self}")
        if self.d_t != self.heads * self.d_h:
            raise ValueError(f"d_t={self.d_t} must equal heads*d_h={self.heads * self.d_h}")

    @property
    def patch_volume(self) -> int:
        d1, d2, d3 = self.patch
        return d1 * d2 * d3

    def tokens(self, dims) -> int:
        check_divisible(dims, self.patch)
        return math.prod(n // d for n, d in zip(dims, self.patch))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch"] = tuple(d["patch"])
        return cls(**d)


def check_divisible(dims, patch) -> None:
    if len(dims) != 3 or any(n % d for n, d in zip(dims, patch)):
        raise ValueError(f"grid {tuple(dims)} is not divisible into {tuple(patch)} patches")


def _circular_conv(cin: int, cout: int) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel_size=3, padding=1, padding_mode="circular")


class PatchEmbed(nn.Module):
    """3x3x3 circular conv, patch flattening, a one-hidden-layer MLP and a positional table."""

    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.cfg = cfg
        self.conv = _circular_conv(in_channels, cfg.channels)
        width = cfg.channels * cfg.patch_volume
        self.mlp = nn.Sequential(nn.Linear(width, cfg.d_t), nn.ReLU(), nn.Linear(cfg.d_t, cfg.d_t))
        self.pos = nn.Parameter(torch.randn(cfg.max_tokens, cfg.d_t) * 0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d1, d2, d3 = self.cfg.patch
        check_divisible(x.shape[-3:], self.cfg.patch)
        h = self.conv(x)
        h = rearrange(h, "b c (n1 d1) (n2 d2) (n3 d3) -> b (n1 n2 n3) (c d1 d2 d3)", d1=d1, d2=d2, d3=d3)
        S = h.shape[1]
        if S > self.cfg.max_tokens:
            raise ValueError(f"{S} tokens exceed the positional table size {self.cfg.max_tokens}")
        return self.mlp(h) + self.pos[:S]


class OneWayAttentionLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        inner = cfg.heads * cfg.d_h
        self.norm_x = nn.LayerNorm(cfg.d_t)
        self.norm_u = nn.LayerNorm(cfg.d_t)
        self.q = nn.Linear(cfg.d_t, inner, bias=False)
        self.k = nn.Linear(cfg.d_t, inner, bias=False)
        self.v = nn.Linear(cfg.d_t, inner, bias=False)
        self.k_u = nn.Linear(cfg.d_t, inner, bias=False)
        self.v_u = nn.Linear(cfg.d_t, inner, bias=False)
        self.out = nn.Linear(inner, cfg.d_t)
        self.norm_ff = nn.LayerNorm(cfg.d_t)
        self.ff1 = nn.Linear(cfg.d_t, cfg.ff_mult * cfg.d_t)
        self.ff2 = nn.Linear(cfg.ff_mult * cfg.d_t, cfg.d_t)

    def attention(self, x, u, mask_partials: bool = False):
        """Multi-head attention of ``x`` over ``[x; u]``; returns (output, A) with A of shape (B, H, S, S+SJ)."""
        H = self.cfg.heads
        xn = self.norm_x(x)
        un = self.norm_u(u)
        split = lambda t: rearrange(t, "b s (h d) -> b h s d", h=H)
        q = split(self.q(xn))
        k = torch.cat([split(self.k(xn)), split(self.k_u(un))], dim=2)
        v = torch.cat([split(self.v(xn)), split(self.v_u(un))], dim=2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.d_h)
        if mask_partials and u.shape[1]:
            S = x.shape[1]
            scores = scores.masked_fill(torch.arange(k.shape[2], device=x.device) >= S, float("-inf"))
        A = scores.softmax(dim=-1)
        o = rearrange(A @ v, "b h s d -> b s (h d)")
        return self.out(o), A

    def forward(self, x, u, *, mask_partials: bool = False, return_attention: bool = False):
        a, A = self.attention(x, u, mask_partials)
        x = x + a
        x = x + self.ff2(F.relu(self.ff1(self.norm_ff(x))))
        return (x, A) if return_attention else x


class CrysFormer(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed_p = PatchEmbed(cfg, cfg.in_channels)
        self.embed_u = PatchEmbed(cfg, 1)
        self.layers = nn.ModuleList([OneWayAttentionLayer(cfg) for _ in range(cfg.layers)])
        self.norm_out = nn.LayerNorm(cfg.d_t)
        self.decode_mlp = nn.Sequential(
            nn.Linear(cfg.d_t, cfg.d_t), nn.ReLU(), nn.Linear(cfg.d_t, cfg.channels * cfg.patch_volume)
        )
        self.out_conv = _circular_conv(cfg.channels, 1)

    def embed_patterson(self, p: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        """(B, N1, N2, N3) Patterson maps to (B, S, d_t) tokens."""
        x = p.unsqueeze(1)
        if prior is not None:
            x = torch.cat([x, prior.unsqueeze(1)], dim=1)
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"model expects {self.cfg.in_channels} input channel(s), got {x.shape[1]}")
        return self.embed_p(x)

    def embed_partials(self, u: torch.Tensor | None, batch: int, dims) -> torch.Tensor:
        """(B, J, N1, N2, N3) partial maps to (B, S*J, d_t) tokens, concatenated in j order."""
        if u is None or u.shape[1] == 0:
            return torch.zeros(batch, 0, self.cfg.d_t, dtype=self.embed_u.pos.dtype, device=self.embed_u.pos.device)
        B, J = u.shape[:2]
        if tuple(u.shape[2:]) != tuple(dims):
            raise ValueError(f"partial maps {tuple(u.shape[2:])} do not match Patterson grid {tuple(dims)}")
        if J > self.cfg.J_max:
            raise ValueError(f"{J} partial structures exceed J_max={self.cfg.J_max}")
        tok = self.embed_u(rearrange(u, "b j n1 n2 n3 -> (b j) 1 n1 n2 n3"))
        return rearrange(tok, "(b j) s d -> b (j s) d", b=B, j=J)

    def decode_tokens(self, x: torch.Tensor, dims) -> torch.Tensor:
        d1, d2, d3 = self.cfg.patch
        n1, n2, n3 = (n // d for n, d in zip(dims, self.cfg.patch))
        if x.shape[1] != n1 * n2 * n3:
            raise ValueError(f"{x.shape[1]} tokens cannot tile a {tuple(dims)} grid")
        h = self.decode_mlp(self.norm_out(x))
        h = rearrange(
            h, "b (n1 n2 n3) (c d1 d2 d3) -> b c (n1 d1) (n2 d2) (n3 d3)", n1=n1, n2=n2, n3=n3, d1=d1, d2=d2, d3=d3
        )
        return torch.tanh(self.out_conv(h)).squeeze(1)

    def forward(self, p, u=None, prior=None, *, mask_partials: bool = False, trace: list | None = None):
        dims = tuple(p.shape[-3:])
        check_divisible(dims, self.cfg.patch)
        x = self.embed_patterson(p, prior)
        U = self.embed_partials(u, p.shape[0], dims)
        for layer in self.layers:
            if trace is None:
                x = layer(x, U, mask_partials=mask_partials)
            else:
                trace.append({"u": U.detach().clone()})
                x, A = layer(x, U, mask_partials=mask_partials, return_attention=True)
                trace[-1]["attention"] = A.detach()
        return self.decode_tokens(x, dims)


def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def _conv3(i: int, o: int) -> int:
    return 27 * i * o + o


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars.

    embed(cin) = conv3(cin->c) + lin(cP->d_t) + lin(d_t->d_t) + T*d_t
    layer      = 3 norms + 5 bias-free projections d_t->H*d_h + lin(H*d_h->d_t)
                 + lin(d_t->f*d_t) + lin(f*d_t->d_t)
    head       = norm + lin(d_t->d_t) + lin(d_t->cP) + conv3(c->1)
    """
    c, d, P, T = cfg.channels, cfg.d_t, cfg.patch_volume, cfg.max_tokens
    inner = cfg.heads * cfg.d_h

    def embed(cin):
        return _conv3(cin, c) + _linear(c * P, d) + _linear(d, d) + T * d

    layer = 3 * 2 * d + 5 * _linear(d, inner, bias=False) + _linear(inner, d) + _linear(d, cfg.ff_mult * d) + _linear(cfg.ff_mult * d, d)
    head = 2 * d + _linear(d, d) + _linear(d, c * P) + _conv3(c, 1)
    return embed(cfg.in_channels) + embed(1) + cfg.layers * layer + head
