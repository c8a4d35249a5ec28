"""Toy image encoders producing the three feature formats the adapter handles:
spatial maps (CNN), class-token sequences (single ViT), and dual class tokens
(two-branch ViT with different patch sizes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .errors import ConfigError
from .layers import LayerNorm, Linear, Mlp, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass(frozen=True)
class SpatialMap:
    maps: Tensor  # (B, C, H, W)


@dataclass(frozen=True)
class TokenSeq:
    tokens: Tensor  # (B, 1+N, D), class token at index 0

    def __post_init__(self):
        if self.tokens.shape[1] < 2:
            raise ConfigError(
                f"token sequence needs a class token plus at least one patch, "
                f"got {self.tokens.shape[1]} tokens"
            )


@dataclass(frozen=True)
class MultiToken:
    tokens: list[Tensor]  # each (B, D_i)

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ConfigError(f"multi-token bundle needs >= 2 entries, got {len(self.tokens)}")


FeatureBundle = SpatialMap | TokenSeq | MultiToken


@dataclass(frozen=True)
class TinyCnnConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    in_channels: int = 3


@dataclass(frozen=True)
class TinyVitConfig:
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class TinyDualVitConfig:
    big: TinyVitConfig = field(default_factory=lambda: TinyVitConfig(patch_size=8, embed_dim=32))
    small: TinyVitConfig = field(default_factory=lambda: TinyVitConfig(patch_size=16, embed_dim=16))


class TinyCnn(Module):
    """Stages of stride-2 conv+relu; feature dim is the last stage's channels."""

    def __init__(self, cfg: TinyCnnConfig = TinyCnnConfig(), rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.convs: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = cfg.in_channels
        for cout in cfg.channels:
            self.convs.append(Tensor(np.zeros((cout, cin, cfg.kernel, cfg.kernel)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(cout), requires_grad=True))
            cin = cout
        self.feature_dim = cfg.channels[-1]
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        k = self.cfg.kernel
        for w, b in zip(self.convs, self.biases):
            cout, cin = w.shape[0], w.shape[1]
            a = np.sqrt(6.0 / (cin * k * k + cout * k * k))
            w.data[...] = rng.uniform(-a, a, size=w.shape)
            b.data[...] = 0.0

    def forward(self, images: Tensor) -> SpatialMap:
        _, _, h, w = images.shape
        min_side = 2 ** len(self.cfg.channels)
        if h < min_side or w < min_side:
            raise ConfigError(
                f"input {h}x{w} too small for {len(self.cfg.channels)} stride-2 stages"
            )
        x = images
        for conv_w, conv_b in zip(self.convs, self.biases):
            x = ops.conv2d(x, conv_w, stride=2, padding=1)
            x = ops.bias_add_channel(x, conv_b)
            x = ops.relu(x)
        return SpatialMap(x)

    __call__ = forward


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B,C,H,W) -> (B, N, C*patch*patch) in raster order, differentiable."""
    b, c, h, w = images.shape
    if h % patch != 0 or w % patch != 0:
        raise ConfigError(
            f"image {h}x{w} not divisible by patch size {patch}"
        )
    gh, gw = h // patch, w // patch
    x = ops.reshape(images, (b, c, gh, patch, gw, patch))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, p, p)
    return ops.reshape(x, (b, gh * gw, c * patch * patch))


class EncoderBlock(Module):
    """Pre-norm transformer block: x + MHA(LN x), then x + MLP(LN x)."""

    def __init__(self, dim: int, heads: int):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(heads, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = ops.add(x, self.attn(h, h))
        return ops.add(x, self.mlp(self.norm2(x)))

    __call__ = forward


class TinyVit(Module):
    """Patch embedding + class token + position embeddings + encoder blocks."""

    def __init__(self, cfg: TinyVitConfig = TinyVitConfig(), image_size: int = 32,
                 in_channels: int = 3, rng: np.random.Generator | None = None):
        if image_size % cfg.patch_size != 0:
            raise ConfigError(
                f"image {image_size}x{image_size} not divisible by patch size {cfg.patch_size}"
            )
        self.cfg = cfg
        self.image_size = image_size
        self.num_patches = (image_size // cfg.patch_size) ** 2
        patch_dim = in_channels * cfg.patch_size ** 2
        d = cfg.embed_dim
        self.embed = Linear(patch_dim, d)
        self.cls_token = Tensor(np.zeros((1, 1, d)), requires_grad=True)
        self.pos_embed = Tensor(np.zeros((1, 1 + self.num_patches, d)), requires_grad=True)
        self.blocks = [EncoderBlock(d, cfg.heads) for _ in range(cfg.depth)]
        self.feature_dim = d
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        self.embed.init_params(rng)
        d = self.cfg.embed_dim
        a = np.sqrt(3.0 / d)
        self.cls_token.data[...] = rng.uniform(-a, a, size=self.cls_token.shape)
        self.pos_embed.data[...] = rng.uniform(-a, a, size=self.pos_embed.shape)
        for blk in self.blocks:
            blk.init_params(rng)

    def forward(self, images: Tensor) -> TokenSeq:
        b = images.shape[0]
        x = self.embed(patchify(images, self.cfg.patch_size))  # (B, N, D)
        cls = ops.tile_batch(self.cls_token, b)  # (B, 1, D)
        x = ops.concat([cls, x], axis=1)
        x = ops.add(x, ops.tile_batch(self.pos_embed, b))
        for blk in self.blocks:
            x = blk(x)
        return TokenSeq(x)

    __call__ = forward


class TinyDualVit(Module):
    """Two ViT branches with distinct patch sizes; emits both class tokens,
    big (higher-dim) branch first."""

    def __init__(self, cfg: TinyDualVitConfig = TinyDualVitConfig(), image_size: int = 32,
                 in_channels: int = 3, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.big = TinyVit(cfg.big, image_size, in_channels)
        self.small = TinyVit(cfg.small, image_size, in_channels)
        self.feature_dim = cfg.big.embed_dim + cfg.small.embed_dim
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        self.big.init_params(rng)
        self.small.init_params(rng)

    def forward(self, images: Tensor) -> MultiToken:
        tokens = []
        for branch in (self.big, self.small):
            seq = branch(images).tokens
            cls = ops.slice_axis(seq, axis=1, start=0, stop=1)
            tokens.append(ops.reshape(cls, (cls.shape[0], cls.shape[2])))
        return MultiToken(tokens)

    __call__ = forward
