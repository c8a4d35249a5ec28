"""Feature adapter, the four metadata-fusion blocks, and the classifier head.

The adapter standardizes any backbone output into a flat (B, d_f) vector:
spatial maps are average-pooled per channel, token sequences contribute only
the class token, dual-token bundles are concatenated in declared order. The
fusion block then combines that vector with the encoded metadata (B, d_m);
a fixed-width reducer keeps the classifier input size identical across all
backbone/fusion combinations.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as ops
from .backbones import FeatureBundle, MultiToken, SpatialMap, TokenSeq
from .errors import ConfigError
from .layers import Linear, Module, MultiHeadAttention
from .tensor import Tensor


def adapt(features: FeatureBundle) -> Tensor:
    """Standardize a feature bundle to a (B, d_f) vector."""
    if isinstance(features, SpatialMap):
        return ops.adaptive_avg_pool_1x1(features.maps)
    if isinstance(features, TokenSeq):
        cls = ops.slice_axis(features.tokens, axis=1, start=0, stop=1)
        return ops.reshape(cls, (cls.shape[0], cls.shape[2]))
    if isinstance(features, MultiToken):
        return ops.concat(features.tokens, axis=1)
    raise ConfigError(f"unknown feature bundle type {type(features).__name__}")


class ConcatFusion(Module):
    """Parameter-free fusion: f = [v; m]."""

    kind = "concat"

    def __init__(self, image_dim: int, meta_dim: int):
        self.image_dim = image_dim
        self.meta_dim = meta_dim
        self.output_dim = image_dim + meta_dim

    def forward(self, v: Tensor, m: Tensor) -> Tensor:
        if v.shape[0] != m.shape[0]:
            raise ConfigError(
                f"batch mismatch between image features {v.shape} and metadata {m.shape}"
            )
        return ops.concat([v, m], axis=1)

    __call__ = forward


class MetaBlockFusion(Module):
    """Gated fusion: f = sigmoid(tanh(W_b m + b_b) * v + (W_c m + b_c))."""

    kind = "metablock"

    def __init__(self, image_dim: int, meta_dim: int, rng: np.random.Generator | None = None):
        self.image_dim = image_dim
        self.meta_dim = meta_dim
        self.output_dim = image_dim
        self.gate = Linear(meta_dim, image_dim)
        self.shift = Linear(meta_dim, image_dim)
        if rng is not None:
            self.init_params(rng)

    def forward(self, v: Tensor, m: Tensor) -> Tensor:
        gated = ops.mul(ops.tanh(self.gate(m)), v)
        return ops.sigmoid(ops.add(gated, self.shift(m)))

    __call__ = forward


class MetaNetFusion(Module):
    """Multiplicative fusion: per-coordinate scales in (0,1) derived from
    metadata weight the image features, f = sigmoid(W2 relu(W1 m)) * v."""

    kind = "metanet"

    def __init__(self, image_dim: int, meta_dim: int, hidden_dim: int = 64,
                 rng: np.random.Generator | None = None):
        self.image_dim = image_dim
        self.meta_dim = meta_dim
        self.output_dim = image_dim
        self.fc1 = Linear(meta_dim, hidden_dim)
        self.fc2 = Linear(hidden_dim, image_dim)
        if rng is not None:
            self.init_params(rng)

    def forward(self, v: Tensor, m: Tensor) -> Tensor:
        scales = ops.sigmoid(self.fc2(ops.relu(self.fc1(m))))
        return ops.mul(scales, v)

    __call__ = forward


class MatFusion(Module):
    """Guided cross-attention: a metadata query attends over image-feature
    chunks, followed by a two-layer MLP; output is [context; query].

    The image vector is zero-padded to a multiple of ``chunks``, split, and
    each chunk linearly projected to ``attn_dim`` to form the key/value
    tokens. Attention weights of the last forward are kept on
    ``last_weights``.
    """

    kind = "mat"

    def __init__(self, image_dim: int, meta_dim: int, chunks: int = 8,
                 attn_dim: int = 32, heads: int = 4,
                 rng: np.random.Generator | None = None):
        if chunks < 2:
            raise ConfigError(
                f"mat fusion needs >= 2 image chunks (got {chunks}); a single "
                "token makes cross-attention weights constant"
            )
        self.image_dim = image_dim
        self.meta_dim = meta_dim
        self.chunks = chunks
        self.attn_dim = attn_dim
        self.chunk_dim = math.ceil(image_dim / chunks)
        self.pad = self.chunk_dim * chunks - image_dim
        self.output_dim = 2 * attn_dim
        self.chunk_proj = Linear(self.chunk_dim, attn_dim)
        self.query_proj = Linear(meta_dim, attn_dim)
        self.attn = MultiHeadAttention(heads, attn_dim)
        self.mlp_fc1 = Linear(attn_dim, 2 * attn_dim)
        self.mlp_fc2 = Linear(2 * attn_dim, attn_dim)
        self.last_weights: np.ndarray | None = None
        if rng is not None:
            self.init_params(rng)

    def forward(self, v: Tensor, m: Tensor) -> Tensor:
        b = v.shape[0]
        if self.pad:
            v = ops.concat([v, Tensor(np.zeros((b, self.pad)))], axis=1)
        tokens = ops.reshape(v, (b, self.chunks, self.chunk_dim))
        tokens = self.chunk_proj(tokens)  # (B, T, attn_dim)
        q = ops.reshape(self.query_proj(m), (b, 1, self.attn_dim))
        attended = ops.add(q, self.attn(q, tokens))
        self.last_weights = self.attn.last_weights
        context = ops.add(attended, self.mlp_fc2(ops.relu(self.mlp_fc1(attended))))
        fused = ops.concat([context, q], axis=2)  # (B, 1, 2*attn_dim)
        return ops.reshape(fused, (b, self.output_dim))

    __call__ = forward


FUSION_KINDS = ("concat", "metablock", "metanet", "mat")


class ReducerHead(Module):
    """Fixed-width reducer (relu) followed by the class logits layer."""

    def __init__(self, fused_dim: int, num_classes: int, reducer_dim: int = 90,
                 rng: np.random.Generator | None = None):
        self.reducer = Linear(fused_dim, reducer_dim)
        self.classifier = Linear(reducer_dim, num_classes)
        self.reducer_dim = reducer_dim
        self.num_classes = num_classes
        if rng is not None:
            self.init_params(rng)

    def forward(self, fused: Tensor) -> Tensor:
        return self.classifier(ops.relu(self.reducer(fused)))

    __call__ = forward


class FusionModel(Module):
    """backbone -> adapter -> fusion -> reducer -> classifier."""

    def __init__(self, backbone: Module, fusion: Module, head: ReducerHead):
        if fusion.image_dim != backbone.feature_dim:
            raise ConfigError(
                f"dimension audit failed at fusion: backbone publishes "
                f"d_f={backbone.feature_dim} but fusion expects {fusion.image_dim}"
            )
        if head.reducer.in_dim != fusion.output_dim:
            raise ConfigError(
                f"dimension audit failed at head: fusion outputs "
                f"{fusion.output_dim} but reducer expects {head.reducer.in_dim}"
            )
        self.backbone = backbone
        self.fusion = fusion
        self.head = head

    def forward(self, images: Tensor, metadata: Tensor) -> Tensor:
        v = adapt(self.backbone(images))
        return self.head(self.fusion(v, metadata))

    __call__ = forward
