"""Densely connected convolutional branch."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm, Module, he_uniform, param
from .tensor import Tensor, concat, conv2d, pool2d, relu


@dataclass
class DenseNetConfig:
    growth_rate: int = 32
    block_layers: list[int] = field(default_factory=lambda: [6, 12, 48, 32])
    bottleneck_factor: int = 4
    compression: float = 0.5
    stem_channels: int = 64
    image_size: int = 224
    in_channels: int = 3

    @classmethod
    def densenet201(cls, image_size: int = 224) -> "DenseNetConfig":
        return cls(image_size=image_size)

    @classmethod
    def desk(cls, image_size: int = 32) -> "DenseNetConfig":
        return cls(growth_rate=8, block_layers=[2, 2], stem_channels=16, image_size=image_size)

    def validate(self) -> None:
        if self.growth_rate < 1:
            raise ValueError("growth rate must be >= 1")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ValueError("every dense block needs at least one layer")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must lie in (0, 1]")
        side = stem_output_size(self.image_size)
        for _ in self.block_layers[:-1]:
            if side < 2 or side % 2:
                raise ValueError(
                    f"image size {self.image_size} leaves an odd or empty map before a transition"
                )
            side //= 2

    def channel_plan(self) -> list[tuple[str, int]]:
        """Channel count after the stem, each dense block and each transition."""
        plan = [("stem", self.stem_channels)]
        c = self.stem_channels
        for i, n in enumerate(self.block_layers):
            c += n * self.growth_rate
            plan.append((f"block{i}", c))
            if i < len(self.block_layers) - 1:
                c = math.floor(self.compression * c)
                plan.append((f"transition{i}", c))
        return plan

    @property
    def feature_dim(self) -> int:
        return self.channel_plan()[-1][1]


def stem_output_size(image_size: int) -> int:
    after_conv = (image_size + 2 * 3 - 7) // 2 + 1
    return (after_conv + 2 * 1 - 3) // 2 + 1


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        fan_in = in_ch * k * k
        self.weight = param(he_uniform(rng, (out_ch, in_ch, k, k), fan_in))
        self.bias = param(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class CompositeLayer(Module):
    """BN-ReLU-conv1x1 bottleneck, BN-ReLU-conv3x3, then concat onto the input."""

    def __init__(self, in_ch: int, growth_rate: int, bottleneck_factor: int,
                 rng: np.random.Generator):
        super().__init__()
        mid = bottleneck_factor * growth_rate
        self.norm1 = BatchNorm(in_ch)
        self.conv1 = Conv2d(in_ch, mid, 1, rng)
        self.norm2 = BatchNorm(mid)
        self.conv2 = Conv2d(mid, growth_rate, 3, rng, padding=1)
        self.concat = True

    def new_features(self, x: Tensor) -> Tensor:
        h = self.conv1(relu(self.norm1(x)))
        return self.conv2(relu(self.norm2(h)))

    def forward(self, x: Tensor) -> Tensor:
        new = self.new_features(x)
        return concat([x, new], axis=1) if self.concat else new


def composite_layer(x: Tensor, layer: CompositeLayer) -> Tensor:
    return layer(x)


class DenseBlock(Module):
    def __init__(self, in_ch: int, layer_count: int, growth_rate: int,
                 bottleneck_factor: int, rng: np.random.Generator):
        super().__init__()
        if layer_count < 1:
            raise ValueError("a dense block needs at least one layer")
        self.layers = [
            CompositeLayer(in_ch + i * growth_rate, growth_rate, bottleneck_factor, rng)
            for i in range(layer_count)
        ]
        self.out_channels = in_ch + layer_count * growth_rate

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def dense_block(x: Tensor, block: DenseBlock) -> Tensor:
    return block(x)


class Transition(Module):
    """BN-ReLU-conv1x1 to ``floor(compression * C)`` channels, then 2x2 average pool."""

    def __init__(self, in_ch: int, compression: float, rng: np.random.Generator):
        super().__init__()
        self.out_channels = math.floor(compression * in_ch)
        self.norm = BatchNorm(in_ch)
        self.conv = Conv2d(in_ch, self.out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"transition needs even spatial extents, got {x.shape[2:]}")
        return pool2d(self.conv(relu(self.norm(x))), "avg", 2, 2)


def transition(x: Tensor, layer: Transition) -> Tensor:
    return layer(x)


class DenseNetBranch(Module):
    def __init__(self, cfg: DenseNetConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem_conv = Conv2d(cfg.in_channels, cfg.stem_channels, 7, rng, stride=2, padding=3)
        self.stem_norm = BatchNorm(cfg.stem_channels)
        self.blocks: list[DenseBlock] = []
        self.transitions: list[Transition] = []
        c = cfg.stem_channels
        for i, n in enumerate(cfg.block_layers):
            block = DenseBlock(c, n, cfg.growth_rate, cfg.bottleneck_factor, rng)
            self.blocks.append(block)
            c = block.out_channels
            if i < len(cfg.block_layers) - 1:
                t = Transition(c, cfg.compression, rng)
                self.transitions.append(t)
                c = t.out_channels
        self.final_norm = BatchNorm(c)
        self.feature_dim = c
        self.trace: list[tuple[str, tuple[int, ...]]] = []

    def forward(self, image: Tensor) -> Tensor:
        trace = []
        x = relu(self.stem_norm(self.stem_conv(image)))
        x = pool2d(x, "max", 3, 2, padding=1)
        trace.append(("stem", x.shape))
        for i, block in enumerate(self.blocks):
            x = block(x)
            trace.append((f"block{i}", x.shape))
            if i < len(self.transitions):
                x = self.transitions[i](x)
                trace.append((f"transition{i}", x.shape))
        x = relu(self.final_norm(x))
        self.trace = trace
        return x.mean(axis=(2, 3))


def densenet_forward(image: Tensor, branch: DenseNetBranch) -> Tensor:
    return branch(image)
