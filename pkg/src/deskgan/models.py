"""Class-conditional generator and projection discriminator builders.

Desk-scale stage layout: the generator starts from a 4×4 seed and doubles
resolution per stage (4 → 8 → 16 → 32); the discriminator mirrors it.
An attention or parameter-matched residual block can be inserted after any
stage, named by that stage's feature-map resolution — the ablation axis.

Per-layer initialization streams are derived from (seed, layer name), so
two builds that differ only in an inserted block share every other weight
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import (Module, Conv2d, Linear, ConditionalBatchNorm, ProjectionHead,
                     ResidualBlock, upsample_nearest, downsample_avg,
                     global_sum_pool, global_avg_pool, seeded_rng)
from .attention import SelfAttentionBlock


class ConfigError(ValueError):
    pass


BLOCK_KINDS = ("none", "attention", "residual")


def _check_stage_map(block_map: dict, resolution: int) -> dict:
    valid = [r for r in (8, 16, 32) if r <= resolution]
    out = {}
    for res, kind in block_map.items():
        res = int(res)
        if res not in valid:
            raise ConfigError(f"invalid stage {res}; valid stages for resolution "
                              f"{resolution}: {valid}")
        if kind not in BLOCK_KINDS:
            raise ConfigError(f"invalid block kind {kind!r}; expected one of {BLOCK_KINDS}")
        if kind != "none":
            out[res] = kind
    return out


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    num_classes: int = 4
    base_channels: int = 16
    output_resolution: int = 16
    block_kind_at_stage: dict = field(default_factory=dict)
    attention_reduction: int = 8
    spectral_norm: bool = True

    def __post_init__(self):
        r = self.output_resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ConfigError(f"output_resolution must be a power of 2 >= 8, got {r}")
        if r > 64:
            raise ConfigError(f"output_resolution {r} beyond desk scale (<= 64)")
        self.block_kind_at_stage = _check_stage_map(self.block_kind_at_stage, r)

    def stage_resolutions(self) -> list[int]:
        res, out = 8, []
        while res <= self.output_resolution:
            out.append(res)
            res *= 2
        return out

    def channels_at(self, res: int) -> int:
        return self.base_channels * (self.output_resolution // res)


@dataclass
class DiscriminatorConfig:
    num_classes: int = 4
    base_channels: int = 16
    input_resolution: int = 16
    block_kind_at_stage: dict = field(default_factory=dict)
    attention_reduction: int = 8
    spectral_norm: bool = True
    leaky_slope: float = 0.0
    pooling: str = "sum"

    def __post_init__(self):
        r = self.input_resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ConfigError(f"input_resolution must be a power of 2 >= 8, got {r}")
        if self.pooling not in ("sum", "avg"):
            raise ConfigError(f"pooling must be 'sum' or 'avg', got {self.pooling!r}")
        self.block_kind_at_stage = _check_stage_map(self.block_kind_at_stage, r)

    def channels_at(self, res: int) -> int:
        return self.base_channels * (self.input_resolution // res)

    @property
    def feature_dim(self) -> int:
        return self.channels_at(4)


def _make_block(kind: str, channels: int, reduction: int, sn: bool,
                rng: np.random.Generator, dtype):
    if kind == "attention":
        return SelfAttentionBlock(channels, reduction=reduction, spectral_norm=sn,
                                  rng=rng, dtype=dtype)
    return ResidualBlock(channels, reduction=reduction, spectral_norm=sn,
                         rng=rng, dtype=dtype)


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        ch4 = cfg.channels_at(4)
        self.fc = Linear(cfg.latent_dim, ch4 * 16, spectral_norm=cfg.spectral_norm,
                         rng=seeded_rng(seed, "g.fc"), dtype=dtype)
        self.stage_res = cfg.stage_resolutions()
        convs, cbns, blocks = [], [], []
        prev = ch4
        for res in self.stage_res:
            ch = cfg.channels_at(res)
            convs.append(Conv2d(prev, ch, 3, pad=1, bias=False,
                                spectral_norm=cfg.spectral_norm,
                                rng=seeded_rng(seed, f"g.conv{res}"), dtype=dtype))
            cbns.append(ConditionalBatchNorm(cfg.num_classes, ch, dtype=dtype))
            kind = cfg.block_kind_at_stage.get(res, "none")
            blocks.append(None if kind == "none" else
                          _make_block(kind, ch, cfg.attention_reduction, cfg.spectral_norm,
                                      seeded_rng(seed, f"g.block{res}"), dtype))
            prev = ch
        self.convs = convs
        self.cbns = cbns
        self.blocks = blocks
        self.to_rgb = Conv2d(prev, 3, 3, pad=1, bias=True, spectral_norm=cfg.spectral_norm,
                             rng=seeded_rng(seed, "g.to_rgb"), dtype=dtype)

    def forward(self, z: Tensor, labels: np.ndarray) -> Tensor:
        b = z.shape[0]
        ch4 = self.cfg.channels_at(4)
        x = T.reshape(self.fc(z), (b, ch4, 4, 4))
        for conv, cbn, block in zip(self.convs, self.cbns, self.blocks):
            x = upsample_nearest(x, 2)
            x = T.relu(cbn(conv(x), labels))
            if block is not None:
                x = block(x)
        return T.tanh(self.to_rgb(x))

    __call__ = forward

    def attention_blocks(self) -> list[tuple[int, SelfAttentionBlock]]:
        return [(res, blk) for res, blk in zip(self.stage_res, self.blocks)
                if isinstance(blk, SelfAttentionBlock)]


class Discriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.stage_res = list(reversed(  # input resolution down to 8
            [r for r in (8, 16, 32) if r <= cfg.input_resolution]))
        convs, blocks = [], []
        prev = 3
        for res in self.stage_res:
            ch = cfg.channels_at(res)
            convs.append(Conv2d(prev, ch, 3, pad=1, bias=True,
                                spectral_norm=cfg.spectral_norm,
                                rng=seeded_rng(seed, f"d.conv{res}"), dtype=dtype))
            kind = cfg.block_kind_at_stage.get(res, "none")
            blocks.append(None if kind == "none" else
                          _make_block(kind, ch, cfg.attention_reduction, cfg.spectral_norm,
                                      seeded_rng(seed, f"d.block{res}"), dtype))
            prev = ch
        self.convs = convs
        self.blocks = blocks
        self.final_conv = Conv2d(prev, cfg.feature_dim, 3, pad=1, bias=True,
                                 spectral_norm=cfg.spectral_norm,
                                 rng=seeded_rng(seed, "d.final_conv"), dtype=dtype)
        self.head = ProjectionHead(cfg.num_classes, cfg.feature_dim,
                                   spectral_norm=cfg.spectral_norm,
                                   rng=seeded_rng(seed, "d.head"), dtype=dtype)

    def _act(self, x: Tensor) -> Tensor:
        if self.cfg.leaky_slope > 0:
            return T.leaky_relu(x, self.cfg.leaky_slope)
        return T.relu(x)

    def features(self, images: Tensor) -> Tensor:
        x = images
        for conv, block in zip(self.convs, self.blocks):
            x = self._act(conv(x))
            if block is not None:
                x = block(x)
            x = downsample_avg(x, 2)
        x = self._act(self.final_conv(x))
        pool = global_sum_pool if self.cfg.pooling == "sum" else global_avg_pool
        return pool(x)

    def forward(self, images: Tensor, labels: np.ndarray) -> Tensor:
        return self.head(self.features(images), labels)

    __call__ = forward

    def attention_blocks(self) -> list[tuple[int, SelfAttentionBlock]]:
        return [(res, blk) for res, blk in zip(self.stage_res, self.blocks)
                if isinstance(blk, SelfAttentionBlock)]


def build_generator(cfg: GeneratorConfig, seed: int = 0, dtype=np.float32) -> Generator:
    return Generator(cfg, seed=seed, dtype=dtype)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0, dtype=np.float32) -> Discriminator:
    return Discriminator(cfg, seed=seed, dtype=dtype)


def sample(generator: Generator, n: int, class_or_all, seed: int) -> tuple[Tensor, np.ndarray]:
    """Deterministic sampling: z ~ N(0, I) from a Philox stream keyed by seed.

    ``class_or_all`` is either a class index (n images of that class) or
    "all" (n images of every class, labels grouped by class).
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    cfg = generator.cfg
    rng = np.random.Generator(np.random.Philox(seed))
    if class_or_all == "all":
        labels = np.repeat(np.arange(cfg.num_classes), n)
    else:
        cls = int(class_or_all)
        if not 0 <= cls < cfg.num_classes:
            raise IndexError(f"class {cls} out of range [0, {cfg.num_classes})")
        labels = np.full(n, cls, dtype=np.int64)
    z = Tensor(rng.standard_normal((labels.size, cfg.latent_dim)).astype(np.float32))
    was_training = generator.training
    generator.eval()
    try:
        with T.no_grad():
            images = generator(z, labels)
    finally:
        generator.train(was_training)
    return images, labels.astype(np.int64)


def block_parameter_report(channels: int, reduction: int = 8) -> dict:
    """Exact parameter counts for the attention block and its residual
    control at one insertion point (Table-style control condition)."""
    cbar = max(1, channels // reduction)
    hidden = max(1, 2 * cbar)
    attn = 4 * channels * cbar + 1
    resid = hidden * channels * 2
    return {"channels": channels, "attention_params": attn,
            "residual_params": resid, "difference": attn - resid}
