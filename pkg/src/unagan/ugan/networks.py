"""Generator, discriminator and patch projection heads for magnitude translation.

Tensor layout is ``[batch, channel, freq, time]``. Generator layer names used for
patch sampling:

    input            raw input magnitude, ``H x W``
    downsample-i     after the i-th stride-2 convolution, ``ceil(H / 2**i) x ceil(W / 2**i)``
    resblock-i       after the i-th residual block, bottleneck size ``ceil(H / 2**n) x ceil(W / 2**n)``
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GeneratorConfig:
    n_resnet_blocks: int = 9
    n_attention_layers: int = 3
    n_downsample: int = 2
    base_channels: int = 64
    dropout_rate: float = 0.5
    norm: str = "instance"
    n_bins: int = 129
    freq_coord: bool = True

    def __post_init__(self):
        if self.n_resnet_blocks < 1:
            raise ConfigError("n_resnet_blocks must be >= 1")
        if self.n_downsample < 0 or self.n_attention_layers < 0:
            raise ConfigError("n_downsample and n_attention_layers must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    @property
    def min_width(self) -> int:
        return 2 ** (self.n_downsample + 2)

    def layer_names(self) -> list[str]:
        names = ["input"]
        names += [f"downsample-{i + 1}" for i in range(self.n_downsample)]
        names += [f"resblock-{i + 1}" for i in range(self.n_resnet_blocks)]
        return names

    def layer_channels(self, name: str) -> int:
        if name == "input":
            return 1
        kind, _, index = name.partition("-")
        if kind == "downsample" and index.isdigit() and 1 <= int(index) <= self.n_downsample:
            return self.base_channels * 2 ** int(index)
        if kind == "resblock" and index.isdigit() and 1 <= int(index) <= self.n_resnet_blocks:
            return self.base_channels * 2 ** self.n_downsample
        raise ConfigError(f"unknown generator layer {name!r}", name)

    def layer_shape(self, name: str, height: int, width: int) -> tuple[int, int]:
        self.layer_channels(name)
        if name == "input":
            return height, width
        kind, _, index = name.partition("-")
        factor = int(index) if kind == "downsample" else self.n_downsample
        for _ in range(factor):
            height, width = -(-height // 2), -(-width // 2)
        return height, width


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 5
    kernel: int = 4
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    leaky_slope: float = 0.2
    base_channels: int = 64
    norm: str = "none"
    n_bins: int = 129
    freq_coord: bool = True

    def __post_init__(self):
        if self.n_layers != 5 or self.kernel != 4 or tuple(self.strides) != (2, 2, 2, 1, 1):
            raise ConfigError("discriminator layout is fixed: 5 layers, 4x4 kernels, strides (2,2,2,1,1)")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        for stride in self.strides:
            height = (height + 2 - self.kernel) // stride + 1
            width = (width + 2 - self.kernel) // stride + 1
        return height, width


def receptive_field(kernels, strides) -> tuple[int, int, int]:
    """Return (size, jump, start offset) of one output unit for stacked padding-1 convolutions."""
    size, jump, start = 1, 1, 0
    for k, s in zip(kernels, strides):
        size += (k - 1) * jump
        start -= jump
        jump *= s
    return size, jump, start


def _norm2d(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    return nn.Identity()


def _check_magnitude(x: torch.Tensor, n_bins: int, min_width: int) -> torch.Tensor:
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected magnitude [B,1,{n_bins},W], got {tuple(x.shape)}")
    if x.shape[2] != n_bins:
        raise ShapeError(f"magnitude height must be {n_bins}, got {x.shape[2]}")
    if x.shape[3] < min_width:
        raise ShapeError(f"magnitude width must be >= {min_width}, got {x.shape[3]}")
    return x


def _with_freq_coord(x: torch.Tensor) -> torch.Tensor:
    b, _, h, w = x.shape
    coord = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
    return torch.cat([x, coord.view(1, 1, h, 1).expand(b, 1, h, w)], dim=1)


class ResnetBlock(nn.Module):
    def __init__(self, channels, norm, dropout_rate):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm2d(norm, channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm2d(norm, channels),
            nn.Dropout(dropout_rate),
        )

    def forward(self, x):
        return x + self.body(x)


class SelfAttention2d(nn.Module):
    """Single-head non-local attention over all time-frequency positions.

    The residual gain starts at zero so a fresh layer is an identity map.
    """

    def __init__(self, channels):
        super().__init__()
        inner = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gain = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        attn = torch.softmax(torch.bmm(q, k), dim=-1)
        out = torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)
        return x + self.gain * out


class Generator(nn.Module):
    """Clean-to-noisy magnitude translator.

    Output is ``relu(input + residual)`` where the final convolution starts at
    zero, so an untrained generator passes its input through unchanged.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        in_ch = 2 if cfg.freq_coord else 1
        self.ingress = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_ch, c, 7), _norm2d(cfg.norm, c), nn.ReLU(True)
        )
        self.down = nn.ModuleList()
        for i in range(cfg.n_downsample):
            mult = 2 ** i
            self.down.append(nn.Sequential(
                nn.Conv2d(c * mult, c * mult * 2, 3, stride=2, padding=1),
                _norm2d(cfg.norm, c * mult * 2),
                nn.ReLU(True),
            ))
        width = c * 2 ** cfg.n_downsample
        self.blocks = nn.ModuleList(ResnetBlock(width, cfg.norm, cfg.dropout_rate) for _ in range(cfg.n_resnet_blocks))
        self.attention = nn.ModuleList(SelfAttention2d(width) for _ in range(cfg.n_attention_layers))
        self.up_convs = nn.ModuleList()
        self.up_post = nn.ModuleList()
        for i in reversed(range(cfg.n_downsample)):
            mult = 2 ** (i + 1)
            self.up_convs.append(nn.ConvTranspose2d(c * mult, c * mult // 2, 3, stride=2, padding=1))
            self.up_post.append(nn.Sequential(_norm2d(cfg.norm, c * mult // 2), nn.ReLU(True)))
        self.egress = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 1, 7))
        nn.init.zeros_(self.egress[1].weight)
        nn.init.zeros_(self.egress[1].bias)

    def check_input(self, x):
        return _check_magnitude(x, self.cfg.n_bins, self.cfg.min_width)

    def forward(self, x, layers=None, encode_only=False):
        """Translate ``x``; with ``layers`` also return the named activations.

        ``encode_only`` stops as soon as every requested layer has been produced.
        """
        x = self.check_input(x)
        wanted = list(layers) if layers is not None else []
        for name in wanted:
            self.cfg.layer_channels(name)
        feats = {}
        if "input" in wanted:
            feats["input"] = x

        def done():
            return encode_only and len(feats) == len(wanted)

        if done():
            return [feats[n] for n in wanted]
        h = self.ingress(_with_freq_coord(x) if self.cfg.freq_coord else x)
        sizes = []
        for i, layer in enumerate(self.down):
            sizes.append(h.shape[-2:])
            h = layer(h)
            name = f"downsample-{i + 1}"
            if name in wanted:
                feats[name] = h
            if done():
                return [feats[n] for n in wanted]
        for i, block in enumerate(self.blocks):
            h = block(h)
            name = f"resblock-{i + 1}"
            if name in wanted:
                feats[name] = h
            if done():
                return [feats[n] for n in wanted]
        for layer in self.attention:
            h = layer(h)
        for conv, post, size in zip(self.up_convs, self.up_post, reversed(sizes)):
            h = post(conv(h, output_size=list(size)))
        out = F.relu(x + self.egress(h))
        if layers is None:
            return out
        return out, [feats[n] for n in wanted]

    def features(self, x, layers):
        return self.forward(x, layers=layers, encode_only=True)


class Discriminator(nn.Module):
    """Patch discriminator: five 4x4 convolutions, strides (2,2,2,1,1), one logit channel."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        in_ch = 2 if cfg.freq_coord else 1
        chans = [in_ch, c, c * 2, c * 4, c * 8, 1]
        layers = []
        for i, stride in enumerate(cfg.strides):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], cfg.kernel, stride=stride, padding=1))
            if i < len(cfg.strides) - 1:
                if i > 0:
                    layers.append(_norm2d(cfg.norm, chans[i + 1]))
                layers.append(nn.LeakyReLU(cfg.leaky_slope, True))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        x = _check_magnitude(x, self.cfg.n_bins, 1)
        if self.cfg.freq_coord:
            x = _with_freq_coord(x)
        return self.model(x)


class PatchProjector(nn.Module):
    """One two-layer projection head per sampled generator layer."""

    def __init__(self, gen_cfg: GeneratorConfig, layers, dim: int = 256):
        super().__init__()
        self.layers = list(layers)
        self.heads = nn.ModuleDict({
            name.replace("-", "_"): nn.Sequential(
                nn.Linear(gen_cfg.layer_channels(name), dim), nn.ReLU(True), nn.Linear(dim, dim)
            )
            for name in self.layers
        })

    def forward(self, name, patches):
        return self.heads[name.replace("-", "_")](patches)
