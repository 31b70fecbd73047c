"""Stage 1: encoder, multichannel quantizer and a decoder modulated by the quantized map.

The decoder starts from an initial feature map ``F0`` at latent resolution
(sinusoidal positions, a learned constant or Fourier features of ``z_q``) and
replaces GroupNorm with :class:`SpatialConditionalNorm` in its first
``scn_blocks`` resolution blocks. All tensors are channels-first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .vq import Codebook, QuantizeResult, lookup, quantize, straight_through

INITIAL_FEATURE_KINDS = ("sinusoid", "learned_constant", "fourier")


def num_groups(channels: int) -> int:
    groups = 32 if channels >= 32 else channels
    if channels % groups:
        raise ConfigurationError(f"{channels} channels cannot be split into {groups} groups")
    return groups


def upsample_to(z_q: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    h, w = z_q.shape[-2:]
    th, tw = size
    if th < h or tw < w or th % h or tw % w:
        raise ConfigurationError(f"cannot upsample {h}x{w} latent to {th}x{tw} by an integer factor")
    if (th, tw) == (h, w):
        return z_q
    return F.interpolate(z_q, size=(th, tw), mode="nearest")


class SpatialConditionalNorm(nn.Module):
    """``gamma(z_q) * GroupNorm(F) + beta(z_q)`` with per-pixel 1x1 affine maps.

    ``z_q`` is upsampled (nearest) to the activation's resolution before the
    maps are applied, so scale and bias always match ``F`` pixel for pixel.
    """

    def __init__(self, channels: int, zq_channels: int, groups: int | None = None, eps: float = 1e-6):
        super().__init__()
        groups = num_groups(channels) if groups is None else groups
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible by {groups} groups")
        if eps <= 0:
            raise ConfigurationError("eps must be positive")
        self.norm = nn.GroupNorm(groups, channels, eps=eps, affine=False)
        self.gamma_map = nn.Conv2d(zq_channels, channels, kernel_size=1)
        self.beta_map = nn.Conv2d(zq_channels, channels, kernel_size=1)
        nn.init.normal_(self.gamma_map.weight, std=0.02)
        nn.init.ones_(self.gamma_map.bias)
        nn.init.normal_(self.beta_map.weight, std=0.02)
        nn.init.zeros_(self.beta_map.bias)

    def modulation(self, z_q: torch.Tensor, size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        z = upsample_to(z_q, size)
        return self.gamma_map(z), self.beta_map(z)

    def forward(self, x: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.modulation(z_q, x.shape[-2:])
        return gamma * self.norm(x) + beta


def scn_modulate(activation: torch.Tensor, z_q: torch.Tensor, layer: SpatialConditionalNorm) -> torch.Tensor:
    return layer(activation, z_q)


class GroupNormPlain(nn.GroupNorm):
    """GroupNorm that ignores the conditioning argument, for non-modulated blocks."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__(num_groups(channels), channels, eps=eps, affine=True)

    def forward(self, x: torch.Tensor, z_q: torch.Tensor | None = None) -> torch.Tensor:
        return super().forward(x)


def sinusoid_features(height: int, width: int, channels: int) -> torch.Tensor:
    """Fixed 2D sin/cos code, ``(channels, height, width)``.

    Half the channels encode the row and half the column; within each half,
    sines and cosines at geometrically spaced frequencies.
    """
    if channels % 4:
        raise ConfigurationError(f"sinusoid features need channels divisible by 4, got {channels}")
    quarter = channels // 4
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    rows = torch.arange(height, dtype=torch.float64)[:, None] * freqs  # (H, q)
    cols = torch.arange(width, dtype=torch.float64)[:, None] * freqs  # (W, q)
    row_code = torch.cat([rows.sin(), rows.cos()], dim=1)[:, None, :].expand(height, width, 2 * quarter)
    col_code = torch.cat([cols.sin(), cols.cos()], dim=1)[None, :, :].expand(height, width, 2 * quarter)
    return torch.cat([row_code, col_code], dim=-1).permute(2, 0, 1).float().contiguous()


class InitialFeature(nn.Module):
    """Builds the decoder's first activation ``F0`` at latent resolution."""

    def __init__(self, kind: str, zq_channels: int, out_channels: int, height: int, width: int, seed: int = 0):
        super().__init__()
        if kind not in INITIAL_FEATURE_KINDS:
            raise ConfigurationError(f"unknown initial feature kind {kind!r}; choose from {INITIAL_FEATURE_KINDS}")
        self.kind = kind
        self.out_channels = out_channels
        self.size = (height, width)
        if kind == "sinusoid":
            self.register_buffer("code", sinusoid_features(height, width, out_channels))
        elif kind == "learned_constant":
            self.const = nn.Parameter(torch.randn(out_channels, height, width))
        else:
            if out_channels % 2:
                raise ConfigurationError("fourier features need an even channel count")
            gen = torch.Generator().manual_seed(seed)
            # fixed, untrained projection
            self.register_buffer("freqs", torch.randn(out_channels // 2, zq_channels, generator=gen))

    def forward(self, z_q: torch.Tensor) -> torch.Tensor:
        b = z_q.shape[0]
        if self.kind == "fourier":
            proj = 2 * math.pi * torch.einsum("mn,bnhw->bmhw", self.freqs, z_q)
            return torch.cat([proj.cos(), proj.sin()], dim=1)
        if z_q.shape[-2:] != self.size:
            raise ConfigurationError(f"latent size {tuple(z_q.shape[-2:])} != decoder size {self.size}")
        grid = self.code if self.kind == "sinusoid" else self.const
        return grid.unsqueeze(0).expand(b, -1, -1, -1)


def initial_feature(kind: str, z_q: torch.Tensor, target_channels: int, seed: int = 0) -> torch.Tensor:
    """Functional form of :class:`InitialFeature` with a freshly drawn module."""
    h, w = z_q.shape[-2:]
    return InitialFeature(kind, z_q.shape[1], target_channels, h, w, seed=seed)(z_q)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, zq_channels: int | None = None):
        super().__init__()
        modulated = zq_channels is not None
        self.norm1 = SpatialConditionalNorm(in_ch, zq_channels) if modulated else GroupNormPlain(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = SpatialConditionalNorm(out_ch, zq_channels) if modulated else GroupNormPlain(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, z_q: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x, z_q)))
        h = self.conv2(F.silu(self.norm2(h, z_q)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=0)

    def forward(self, x):
        return self.conv(F.pad(x, (0, 1, 0, 1)))


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


@dataclass(frozen=True)
class DecoderBlock:
    resolution: int
    width: int
    uses_scn: bool


@dataclass
class AutoencoderConfig:
    image_size: int = 32
    f: int = 8
    n_z: int = 64
    chunks: int = 4
    num_codes: int = 64
    base_width: int = 64
    channel_mult: tuple[int, ...] = ()
    num_res_blocks: int = 2
    scn_blocks: int = 3
    initial_feature_kind: str = "fourier"
    feature_seed: int = 0

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.f < 1 or self.f & (self.f - 1):
            raise ConfigurationError(f"downsample factor must be a power of 2, got {self.f}")
        if self.image_size % self.f:
            raise ConfigurationError(f"image size {self.image_size} not divisible by f={self.f}")
        if self.n_z % self.chunks:
            raise ConfigurationError(f"n_z={self.n_z} not divisible by c={self.chunks}")
        if self.initial_feature_kind not in INITIAL_FEATURE_KINDS:
            raise ConfigurationError(f"unknown initial feature kind {self.initial_feature_kind!r}")
        if self.channel_mult and len(self.channel_mult) != self.levels:
            raise ConfigurationError(
                f"channel_mult needs {self.levels} entries for f={self.f}, got {len(self.channel_mult)}"
            )

    @property
    def levels(self) -> int:
        return int(math.log2(self.f)) + 1

    @property
    def code_dim(self) -> int:
        return self.n_z // self.chunks

    @property
    def latent_size(self) -> int:
        return self.image_size // self.f

    @property
    def widths(self) -> list[int]:
        mult = self.channel_mult or tuple(2 ** i for i in range(self.levels))
        return [self.base_width * m for m in mult]

    def decoder_plan(self) -> list[DecoderBlock]:
        """Resolution blocks from the latent resolution upward."""
        plan = []
        for i, width in enumerate(reversed(self.widths)):
            plan.append(DecoderBlock(self.latent_size * 2 ** i, width, i < self.scn_blocks))
        return plan


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        widths = cfg.widths
        self.f = cfg.f
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        ch = widths[0]
        for i, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, width))
                ch = width
            down = Downsample(ch) if i < len(widths) - 1 else nn.Identity()
            self.levels.append(nn.ModuleDict({"blocks": blocks, "down": down}))
        self.mid = ResBlock(ch, ch)
        self.norm_out = GroupNormPlain(ch)
        self.conv_out = nn.Conv2d(ch, cfg.n_z, 3, padding=1)
        self.quant_conv = nn.Conv2d(cfg.n_z, cfg.n_z, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[-1] % self.f or x.shape[-2] % self.f:
            raise ConfigurationError(f"image size {tuple(x.shape[-2:])} not divisible by f={self.f}")
        h = self.conv_in(x)
        for level in self.levels:
            for block in level["blocks"]:
                h = block(h)
            h = level["down"](h)
        h = self.mid(h)
        h = self.conv_out(F.silu(self.norm_out(h)))
        return self.quant_conv(h)


class ModulatedDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.plan = cfg.decoder_plan()
        self.n_z = cfg.n_z
        self.latent_size = cfg.latent_size
        side = cfg.latent_size
        self.initial = InitialFeature(cfg.initial_feature_kind, cfg.n_z, cfg.n_z, side, side, seed=cfg.feature_seed)
        ch = self.plan[0].width
        self.conv_in = nn.Conv2d(cfg.n_z, ch, 3, padding=1)
        self.levels = nn.ModuleList()
        for i, block in enumerate(self.plan):
            cond = cfg.n_z if block.uses_scn else None
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, block.width, cond))
                ch = block.width
            up = Upsample(ch) if i < len(self.plan) - 1 else nn.Identity()
            self.levels.append(nn.ModuleDict({"blocks": blocks, "up": up}))
        self.norm_out = GroupNormPlain(ch)
        self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.dim() != 4 or z_q.shape[1] != self.n_z or tuple(z_q.shape[-2:]) != (self.latent_size,) * 2:
            raise ConfigurationError(
                f"expected (B, {self.n_z}, {self.latent_size}, {self.latent_size}) latent, got {tuple(z_q.shape)}"
            )
        h = self.conv_in(self.initial(z_q))
        for level in self.levels:
            for block in level["blocks"]:
                h = block(h, z_q)
            h = level["up"](h)
        h = self.conv_out(F.silu(self.norm_out(h)))
        return torch.tanh(h)


@dataclass
class Reconstruction:
    x_hat: torch.Tensor
    result: QuantizeResult
    z_hat: torch.Tensor = field(repr=False)


class MoVQ(nn.Module):
    """Encoder, shared codebook and modulated decoder."""

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        self.encoder = Encoder(self.cfg)
        self.codebook = Codebook(self.cfg.num_codes, self.cfg.code_dim)
        self.decoder = ModulatedDecoder(self.cfg)

    @property
    def token_shape(self) -> tuple[int, int, int]:
        side = self.cfg.latent_size
        return side, side, self.cfg.chunks

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def quantize(self, z_hat: torch.Tensor) -> QuantizeResult:
        return quantize(z_hat, self.codebook, self.cfg.chunks)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_q)

    def decode_indices(self, indices: torch.Tensor) -> torch.Tensor:
        return self.decode(lookup(indices, self.codebook))

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        return self.quantize(self.encode(x)).indices

    def reconstruct(self, x: torch.Tensor) -> Reconstruction:
        z_hat = self.encode(x)
        result = self.quantize(z_hat)
        x_hat = self.decode(straight_through(z_hat, result.z_q))
        return Reconstruction(x_hat, result, z_hat)

    def forward(self, x: torch.Tensor) -> Reconstruction:
        return self.reconstruct(x)


class PatchDiscriminator(nn.Module):
    """Small PatchGAN critic used by the optional adversarial term."""

    def __init__(self, width: int = 32, layers: int = 2):
        super().__init__()
        mods: list[nn.Module] = [nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = width
        for _ in range(1, layers):
            mods += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.GroupNorm(num_groups(ch * 2), ch * 2), nn.LeakyReLU(0.2)]
            ch *= 2
        mods.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)
