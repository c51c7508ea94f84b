"""DDNet: dense encoder, densely connected deformable block, transposed-conv decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .deform import DeformLayer, DeformSpec
from .layers import BatchNorm2d, Conv2d, Module, TransposedConv2d, set_names
from .ops import ConvSpec
from .tensor import Tensor, concat_channels, relu, sigmoid

VARIANTS = ("dense_deformable", "plain_deformable", "dilated")
ALLOWED_DILATIONS = (5, 7)


class ConfigError(ValueError):
    """The model or training configuration is invalid."""


@dataclass
class ModelConfig:
    input_size: tuple = (224, 224)
    stem_channels: int = 64
    growth_rate: int = 32
    bottleneck_factor: int = 4
    block_layers: tuple = (6, 12)
    deform_layers: int = 3
    deform_channels: int = 64
    variant: str = "dense_deformable"
    dilation: int = 5
    postprocess_threshold: Optional[float] = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.block_layers = tuple(int(v) for v in self.block_layers)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(input_size=(64, 64), stem_channels=16, growth_rate=8, deform_channels=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(input_size=(16, 16), stem_channels=4, growth_rate=2, block_layers=(1, 1),
                    deform_channels=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            return {"full": cls.full, "desk": cls.desk, "tiny": cls.tiny}[name](**overrides)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}") from None

    def validate(self) -> None:
        h, w = self.input_size
        if h < 8 or w < 8 or h % 8 or w % 8:
            raise ConfigError(f"input_size {self.input_size} must be positive multiples of 8")
        if min(self.stem_channels, self.growth_rate, self.deform_channels, self.bottleneck_factor) < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.block_layers) != 2 or min(self.block_layers) < 1:
            raise ConfigError("block_layers needs two positive entries")
        if self.deform_layers < 1:
            raise ConfigError("deform_layers must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "dilated" and self.dilation not in ALLOWED_DILATIONS:
            raise ConfigError(f"dilation must be one of {ALLOWED_DILATIONS}")
        if self.postprocess_threshold is not None and not 0 <= self.postprocess_threshold <= 1:
            raise ConfigError("postprocess_threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DenseLayer(Module):
    """BN-ReLU-1x1 bottleneck then BN-ReLU-3x3, emitting ``growth`` channels."""

    def __init__(self, in_channels: int, growth: int, bottleneck: int, rng, dtype):
        width = bottleneck * growth
        self.norm1 = BatchNorm2d(in_channels, dtype)
        self.conv1 = Conv2d(ConvSpec(in_channels, width, 1, has_bias=False), rng, dtype)
        self.norm2 = BatchNorm2d(width, dtype)
        self.conv2 = Conv2d(ConvSpec(width, growth, 3, 1, 1, has_bias=False), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.norm2(self.conv1(relu(self.norm1(x))))))


class DenseBlock(Module):
    def __init__(self, in_channels: int, n_layers: int, growth: int, bottleneck: int, rng, dtype):
        if n_layers < 1:
            raise ConfigError("a dense block needs at least one layer")
        self.layers = [DenseLayer(in_channels + i * growth, growth, bottleneck, rng, dtype)
                       for i in range(n_layers)]
        self.out_channels = in_channels + n_layers * growth

    def __call__(self, x: Tensor) -> Tensor:
        features = [x]
        for layer in self.layers:
            features.append(layer(concat_channels(features)))
        return concat_channels(features)


def dense_block(x: Tensor, block: DenseBlock) -> Tensor:
    return block(x)


class Transition(Module):
    def __init__(self, in_channels: int, out_channels: int, rng, dtype):
        self.norm = BatchNorm2d(in_channels, dtype)
        self.conv = Conv2d(ConvSpec(in_channels, out_channels, 1, has_bias=False), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.avg_pool(self.conv(relu(self.norm(x))), 2, 2)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.stem = Conv2d(ConvSpec(3, cfg.stem_channels, 7, 2, 3, has_bias=False), rng, dtype)
        self.stem_norm = BatchNorm2d(cfg.stem_channels, dtype)
        self.block1 = DenseBlock(cfg.stem_channels, cfg.block_layers[0], cfg.growth_rate,
                                 cfg.bottleneck_factor, rng, dtype)
        mid = self.block1.out_channels // 2
        self.transition = Transition(self.block1.out_channels, mid, rng, dtype)
        self.block2 = DenseBlock(mid, cfg.block_layers[1], cfg.growth_rate, cfg.bottleneck_factor, rng, dtype)
        self.out_norm = BatchNorm2d(self.block2.out_channels, dtype)
        self.project = Conv2d(ConvSpec(self.block2.out_channels, cfg.deform_channels, 1), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.max_pool(relu(self.stem_norm(self.stem(x))), 3, 2, 1)
        x = self.block2(self.transition(self.block1(x)))
        return self.project(relu(self.out_norm(x)))


class DeformUnit(Module):
    """One deformable (or dilated) 3x3 convolution followed by BN and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, dilation: Optional[int], rng, dtype):
        if dilation is None:
            self.conv = DeformLayer(DeformSpec(ConvSpec(in_channels, out_channels, 3, 1, 1)), rng, dtype)
        else:
            self.conv = Conv2d(ConvSpec(in_channels, out_channels, 3, 1, dilation, dilation), rng, dtype)
        self.norm = BatchNorm2d(out_channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))


class DeformBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.dense = cfg.variant != "plain_deformable"
        dilation = cfg.dilation if cfg.variant == "dilated" else None
        c, g = cfg.deform_channels, cfg.deform_channels
        self.units = [
            DeformUnit(c + i * g if self.dense else c, g, dilation, rng, dtype)
            for i in range(cfg.deform_layers)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        features = [x]
        y = x
        for unit in self.units:
            y = unit(concat_channels(features) if self.dense else y)
            features.append(y)
        return y


def dense_deformable_block(x: Tensor, block: DeformBlock) -> Tensor:
    return block(x)


class Decoder(Module):
    """tconv/2 -> upsample x2 -> tconv (refine) -> upsample x2 -> tconv to one channel."""

    def __init__(self, in_channels: int, rng, dtype):
        c1 = max(in_channels // 2, 1)
        c2 = max(in_channels // 4, 1)
        self.up1 = TransposedConv2d(ConvSpec(in_channels, c1, 4, 2, 1), rng, dtype)
        self.norm1 = BatchNorm2d(c1, dtype)
        self.refine = TransposedConv2d(ConvSpec(c1, c2, 3, 1, 1), rng, dtype)
        self.norm2 = BatchNorm2d(c2, dtype)
        self.head = TransposedConv2d(ConvSpec(c2, 1, 3, 1, 1), rng, dtype)

    def logits(self, x: Tensor) -> Tensor:
        x = ops.bilinear_upsample(relu(self.norm1(self.up1(x))), 2)
        x = ops.bilinear_upsample(relu(self.norm2(self.refine(x))), 2)
        return self.head(x)

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))


def decoder(features: Tensor, dec: Decoder) -> Tensor:
    return dec(features)


class DDNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(config, rng, dtype)
        self.deform = DeformBlock(config, rng, dtype)
        self.decoder = Decoder(config.deform_channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.dims
        if c != 3 or h % 8 or w % 8:
            raise ValueError(f"DDNet expects (n, 3, h, w) with h, w divisible by 8, got {x.dims}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return self.decoder(self.deform(self.encoder(x)))

    def predict(self, x: Tensor) -> np.ndarray:
        """Saliency maps (n, h, w); binarized when a post-processing threshold is configured."""
        maps = self(x).data[:, 0]
        t = self.config.postprocess_threshold
        if t is not None:
            maps = (maps >= t).astype(maps.dtype)
        return maps


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DDNet:
    config.validate()
    model = DDNet(config, np.random.default_rng(seed), dtype)
    set_names(model)
    return model


def param_count(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())
