"""Randomly initialized encoder-decoder that maps noise to a displacement field.

The layout follows the deep-image-prior "skip" network: each level has a
stride-2 encoder block, a 1x1 skip branch, and a decoder block that fuses the
upsampled deeper features with the skip features.  A final linear 1x1
convolution emits two channels, the x and y displacement in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import (DEFAULT_SLOPE, Rng, Tensor, concat_channels, conv2d, instance_norm,
                   leaky_relu, sample_normal, upsample_bilinear2x)

PARAM_STD = 0.01
INPUT_STD = 0.1
OUTPUT_CHANNELS = 2


@dataclass
class GeneratorConfig:
    levels: int = 5
    channels_down: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    channels_up: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    channels_skip: list[int] = field(default_factory=lambda: [4, 4, 4, 4, 4])
    kernel_size: int = 3
    slope: float = DEFAULT_SLOPE
    input_channels: int = 16
    output_channels: int = OUTPUT_CHANNELS

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"generator needs levels >= 1, got {self.levels}")
        for name in ("channels_down", "channels_up", "channels_skip"):
            values = getattr(self, name)
            if len(values) != self.levels:
                raise ValueError(
                    f"{name} has {len(values)} entries but levels = {self.levels}")
            if any(c < 0 for c in values) or (name != "channels_skip" and any(c < 1 for c in values)):
                raise ValueError(f"{name} has invalid channel counts: {values}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"slope must lie in [0, 1), got {self.slope}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be positive, got {self.input_channels}")
        if self.output_channels != OUTPUT_CHANNELS:
            raise ValueError(
                f"a 2D displacement needs exactly {OUTPUT_CHANNELS} output channels, "
                f"got {self.output_channels}")

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    def check_input_size(self, h: int, w: int) -> None:
        d = self.divisor
        if h % d or w % d:
            raise ValueError(
                f"input size {h}x{w} is not divisible by 2^levels = {d}; "
                f"pad both sides to a multiple of {d}")
        if (h // d) * (w // d) < 2:
            raise ValueError(
                f"input size {h}x{w} leaves a {h // d}x{w // d} bottleneck after "
                f"{self.levels} levels; instance norm needs at least 2 pixels")


def _layer_shapes(cfg: GeneratorConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    k = cfg.kernel_size
    depth = cfg.input_channels
    for i in range(cfg.levels):
        down, up, skip = cfg.channels_down[i], cfg.channels_up[i], cfg.channels_skip[i]
        deeper = cfg.channels_up[i + 1] if i < cfg.levels - 1 else down
        if skip:
            yield f"skip{i}.w", (skip, depth, 1, 1)
            yield f"skip{i}.b", (skip,)
        yield f"down{i}.0.w", (down, depth, k, k)
        yield f"down{i}.0.b", (down,)
        yield f"down{i}.1.w", (down, down, k, k)
        yield f"down{i}.1.b", (down,)
        yield f"up{i}.0.w", (up, skip + deeper, k, k)
        yield f"up{i}.0.b", (up,)
        yield f"up{i}.1.w", (up, up, 1, 1)
        yield f"up{i}.1.b", (up,)
        depth = down
    yield "out.w", (cfg.output_channels, cfg.channels_up[0], 1, 1)
    yield "out.b", (cfg.output_channels,)


class GeneratorNet:
    """Parameters theta of the generator plus its forward pass."""

    def __init__(self, config: GeneratorConfig, params: dict[str, Tensor]):
        self.config = config
        self.named_params = params

    @property
    def params(self) -> list[Tensor]:
        return list(self.named_params.values())

    def num_scalars(self) -> int:
        return sum(p.size for p in self.named_params.values())

    def scale_params(self, factor: float) -> None:
        for p in self.named_params.values():
            p.data *= factor

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        w = self.named_params[name + ".w"]
        pad = (w.shape[-1] - 1) // 2
        return conv2d(x, w, self.named_params[name + ".b"], stride=stride, padding=pad)

    def _act(self, x: Tensor) -> Tensor:
        return leaky_relu(instance_norm(x), self.config.slope)

    def _level(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        h = self._act(self._conv(x, f"down{i}.0", stride=2))
        h = self._act(self._conv(h, f"down{i}.1"))
        if i < cfg.levels - 1:
            h = self._level(h, i + 1)
        h = upsample_bilinear2x(h)
        if cfg.channels_skip[i]:
            s = self._act(self._conv(x, f"skip{i}"))
            h = concat_channels(s, h)
        h = self._act(self._conv(h, f"up{i}.0"))
        return self._act(self._conv(h, f"up{i}.1"))

    def forward(self, z: Tensor) -> Tensor:
        """Map noise ``z`` (C' x H x W) to a displacement field (2 x H x W)."""
        cfg = self.config
        if z.data.ndim != 3 or z.shape[0] != cfg.input_channels:
            raise ValueError(
                f"generator input must be {cfg.input_channels} x H x W, got {z.shape}")
        cfg.check_input_size(*z.shape[1:])
        return self._conv(self._level(z, 0), "out")

    __call__ = forward


def init_params(config: GeneratorConfig, rng: Rng, std: float = PARAM_STD) -> GeneratorNet:
    """Draw every weight and bias i.i.d. from N(0, std^2)."""
    config.validate()
    params = {name: sample_normal(rng, shape, 0.0, std, requires_grad=True)
              for name, shape in _layer_shapes(config)}
    return GeneratorNet(config, params)


def sample_input(rng: Rng, channels: int, h: int, w: int, std: float = INPUT_STD) -> Tensor:
    """Fresh generator input noise, N(0, std^2) with std = 0.1 by default."""
    if channels < 1 or h < 1 or w < 1:
        raise ValueError(f"input dimensions must be positive, got {channels}x{h}x{w}")
    return sample_normal(rng, (channels, h, w), 0.0, std)


def forward(net: GeneratorNet, z: Tensor) -> Tensor:
    return net.forward(z)


def config_fields() -> list[str]:
    return [f for f in GeneratorConfig.__dataclass_fields__]


def param_array(net: GeneratorNet) -> np.ndarray:
    """All parameters flattened in registration order."""
    return np.concatenate([p.data.ravel() for p in net.params])
