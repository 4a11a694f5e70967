"""3D residual image encoder and binary-occupancy decoder with deep supervision."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import autodiff as ad

FULL_FILTERS = [16, 32, 48, 96, 192, 384]
DESK_FILTERS = [8, 16, 32, 64]


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    levels: int = 4
    filters_per_level: list = field(default_factory=lambda: list(DESK_FILTERS))
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.filters_per_level = list(self.filters_per_level)[: self.levels]
        if self.levels < 3:
            raise ConfigError(f"need at least 3 encoder levels, got {self.levels}")
        if len(self.filters_per_level) != self.levels:
            raise ConfigError(f"{self.levels} levels but {len(self.filters_per_level)} filter counts")
        if any(b < a for a, b in zip(self.filters_per_level, self.filters_per_level[1:])):
            raise ConfigError(f"filters must be non-decreasing, got {self.filters_per_level}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def full_scale(cls, levels: int = 6) -> "EncoderConfig":
        return cls(levels, FULL_FILTERS[:levels])


class Conv3d(nn.Module):
    """Zero-bias, Glorot-uniform 3D convolution on (C, D, H, W) tensors."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, g: torch.Generator, dtype):
        super().__init__()
        fan = k ** 3
        self.weight = nn.Parameter(ad.glorot_uniform((c_out, c_in, k, k, k), c_in * fan, c_out * fan, g).to(dtype))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype))
        self.stride = stride

    def forward(self, x):
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.weight.shape[-1] // 2)


class ResidualBlock3d(nn.Module):
    def __init__(self, c: int, g, dtype):
        super().__init__()
        self.conv_a = Conv3d(c, c, 3, 1, g, dtype)
        self.conv_b = Conv3d(c, c, 3, 1, g, dtype)

    def forward(self, x, dropout_rate: float, generator):
        h = ad.relu(self.conv_a(x))
        h = ad.dropout(h, dropout_rate, self.training, generator)
        return ad.relu(ad.add(x, self.conv_b(h)))


def pyramid_dims(dims, levels: int) -> list[tuple]:
    """Spatial size per level for stride-2, kernel-3, pad-1 downsampling (ceil halving)."""
    out = [tuple(dims)]
    for _ in range(levels - 1):
        out.append(tuple((d + 1) // 2 for d in out[-1]))
    return out


class ImageEncoder(nn.Module):
    """Residual blocks at each level, each followed by a stride-2 convolution.

    ``forward`` returns the feature pyramid: the residual-block output of
    every level, finest first.
    """

    def __init__(self, cfg: EncoderConfig, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        f = cfg.filters_per_level
        self.stem = Conv3d(1, f[0], 3, 1, generator, dtype)
        self.blocks = nn.ModuleList([ResidualBlock3d(c, generator, dtype) for c in f])
        self.down = nn.ModuleList([Conv3d(f[i], f[i + 1], 3, 2, generator, dtype) for i in range(cfg.levels - 1)])
        self.dropout_generator: torch.Generator | None = None

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() != 4 or image.shape[0] != 1:
            raise ad.ShapeError(f"encode: expected (1, D, H, W) image, got {tuple(image.shape)}")
        deepest = pyramid_dims(image.shape[1:], self.cfg.levels)[-1]
        if min(deepest) < 2:
            raise ConfigError(f"{self.cfg.levels} levels reduce {tuple(image.shape[1:])} to {deepest}")
        x = ad.relu(self.stem(image))
        maps = []
        for lvl, block in enumerate(self.blocks):
            x = block(x, self.cfg.dropout_rate, self.dropout_generator)
            maps.append(x)
            if lvl < len(self.down):
                x = ad.relu(self.down[lvl](x))
        return maps


def encode(model: ImageEncoder, image: torch.Tensor) -> list[torch.Tensor]:
    return model(image)


class OccupancyDecoder(nn.Module):
    """Upsample, 3x3x3 conv, concatenate the skip features, 1x1x1 conv; per level.

    One-channel logits from the three finest output levels are upsampled to
    full resolution and summed before a single sigmoid.
    """

    n_heads = 3

    def __init__(self, cfg: EncoderConfig, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        f = cfg.filters_per_level
        L = cfg.levels
        self.up_convs = nn.ModuleList([Conv3d(f[l + 1], f[l], 3, 1, generator, dtype) for l in range(L - 1)])
        self.mix_convs = nn.ModuleList([Conv3d(2 * f[l], f[l], 1, 1, generator, dtype) for l in range(L - 1)])
        self.heads = nn.ModuleList([Conv3d(f[l], 1, 1, 1, generator, dtype) for l in range(self.n_heads)])

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        L = len(pyramid)
        full = pyramid[0].shape[1:]
        outputs = {L - 1: pyramid[-1]}
        x = pyramid[-1]
        for l in range(L - 2, -1, -1):
            up = ad.upsample_nearest(x, pyramid[l].shape[1:])
            up = ad.relu(self.up_convs[l](up))
            x = ad.relu(self.mix_convs[l](ad.concat([up, pyramid[l]], axis=0)))
            outputs[l] = x
        logits = 0
        for l in range(self.n_heads):
            z = self.heads[l](outputs[l])
            for _ in range(l):
                z = ad.upsample_nearest(z, full)
            logits = logits + z
        return ad.sigmoid(logits)


def decode_occupancy(model: OccupancyDecoder, pyramid: list[torch.Tensor]) -> torch.Tensor:
    return model(pyramid)
