"""U-shaped restoration network built from dynamic-frequency blocks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .freq_filter import GDFGBlock, MLPBlock, count_parameters


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 2
    base_channels: int = 8
    n_filters: int = 4
    blocks_per_stage: int = 1
    image_size: int = 64
    input_channels: int = 3
    output_channels: int = 6
    gdfg: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if not 1 <= self.n_filters <= 8:
            raise ValueError(f"n_filters must be in 1..8, got {self.n_filters}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.output_channels != 2 * self.input_channels:
            raise ValueError("output_channels must be twice input_channels (restored + flare)")
        check_resolution(self.image_size, self.image_size, self.stages)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def resolution(self, level: int) -> int:
        return self.image_size // 2**level


def check_resolution(height: int, width: int, stages: int) -> None:
    factor = 2**stages
    for name, size in (("height", height), ("width", width)):
        if size % factor:
            raise ValueError(f"{name} {size} is not divisible by 2**stages = {factor}")


def _blocks(cfg: NetworkConfig, channels: int, size: int, out_channels: int | None = None):
    block = GDFGBlock if cfg.gdfg else MLPBlock
    blocks = [block(channels, size, size, cfg.n_filters) for _ in range(cfg.blocks_per_stage - 1)]
    blocks.append(block(channels, size, size, cfg.n_filters, out_channels=out_channels))
    return nn.ModuleList(blocks)


def _run(blocks, x, resample):
    for blk in blocks:
        x = blk(x, resample=resample)
    return x


class Embed(nn.Module):
    """3x3 conv + LeakyReLU(0.2)."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.conv(x))


class EncoderStage(nn.Module):
    """Dynamic-frequency block(s), then a 4x4 stride-2 conv doubling channels."""

    def __init__(self, cfg: NetworkConfig, level: int):
        super().__init__()
        c, size = cfg.channels(level), cfg.resolution(level)
        self.blocks = _blocks(cfg, c, size)
        self.down = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)

    def forward(self, x, resample: bool = False):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"encoder input must have even spatial dims, got {tuple(x.shape[-2:])}")
        return self.down(_run(self.blocks, x, resample))


class DecoderStage(nn.Module):
    """2x2 stride-2 transposed conv, concat with the skip, then block(s).

    The blocks run at twice the skip width; the last one projects back to it.
    """

    def __init__(self, cfg: NetworkConfig, level: int):
        super().__init__()
        c, size = cfg.channels(level), cfg.resolution(level)
        self.up = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.blocks = _blocks(cfg, 2 * c, size, out_channels=c)

    def forward(self, x, skip, resample: bool = False):
        up = self.up(x)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ValueError(
                f"upsampled map {tuple(up.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}"
            )
        return _run(self.blocks, torch.cat([up, skip], dim=1), resample)


class DeflareNet(nn.Module):
    """Encoder / bottleneck / decoder network predicting (restored, flare).

    The restored image is the input plus the first three head channels;
    the flare layer is the remaining three. Neither is clamped here.
    """

    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = Embed(cfg.input_channels, cfg.base_channels)
        self.encoders = nn.ModuleList(EncoderStage(cfg, i) for i in range(cfg.stages))
        self.bottleneck = _blocks(cfg, cfg.channels(cfg.stages), cfg.resolution(cfg.stages))
        self.decoders = nn.ModuleList(DecoderStage(cfg, i) for i in reversed(range(cfg.stages)))
        self.head = nn.Conv2d(cfg.base_channels, cfg.output_channels, 3, padding=1)
        # zero head: the untrained network returns the input and an empty flare
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, image: torch.Tensor):
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        h, w = image.shape[-2:]
        check_resolution(h, w, self.cfg.stages)
        resample = (h, w) != (self.cfg.image_size, self.cfg.image_size)

        x = self.embed(image)
        skips = []
        for enc in self.encoders:
            skips.append(x)
            x = enc(x, resample)
        x = _run(self.bottleneck, x, resample)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip, resample)
        out = self.head(x)

        c = self.cfg.input_channels
        restored, flare = image + out[:, :c], out[:, c:]
        if squeeze:
            restored, flare = restored[0], flare[0]
        return restored, flare

    def num_parameters(self) -> int:
        return count_parameters(self)
