"""Parameterized layers: affine, layer norm, multi-head attention.

Initialization is uniform fan-based (a = sqrt(6/(fan_in+fan_out))) with zero
biases; the same seed always reproduces the same parameters bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class InitSpec:
    """Deterministic initialization: scheme 'uniform' or 'zeros'."""

    seed: int
    scheme: str = "uniform"

    def __post_init__(self):
        if self.scheme not in ("uniform", "zeros"):
            raise ConfigError(f"unknown init scheme {self.scheme!r}")


class Module:
    """Minimal parameter container: child modules and Tensors found on
    attributes (including lists of them) are collected in insertion order."""

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for value in vars(self).values():
            params.extend(_params_of(value))
        return params

    def init_params(self, rng: np.random.Generator) -> None:
        for value in vars(self).values():
            for child in _modules_of(value):
                child.init_params(rng)


def _params_of(value) -> list[Tensor]:
    if isinstance(value, Tensor) and value.requires_grad:
        return [value]
    if isinstance(value, Module):
        return value.parameters()
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_params_of(v))
        return out
    return []


def _modules_of(value) -> list["Module"]:
    if isinstance(value, Module):
        return [value]
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_modules_of(v))
        return out
    return []


def _uniform_fan(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(module: Module, spec: InitSpec) -> None:
    """Reinitialize every parameter of ``module`` from the spec's seed."""
    if spec.scheme == "zeros":
        for p in module.parameters():
            p.data[...] = 0.0
            p.zero_grad()
        return
    module.init_params(np.random.default_rng(spec.seed))


class Linear(Module):
    """Affine map: weight (out, in), bias (out,)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(np.zeros((out_dim, in_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        self.weight.data[...] = _uniform_fan(
            rng, self.weight.shape, self.in_dim, self.out_dim
        )
        self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        wt = ops.transpose(self.weight, (1, 0))
        return ops.add(ops.matmul(x, wt), self.bias)

    __call__ = forward


class LayerNorm(Module):
    """Normalizes the last axis; epsilon well above float64 noise."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def init_params(self, rng: np.random.Generator) -> None:
        self.gain.data[...] = 1.0
        self.shift.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, self.eps)

    __call__ = forward


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads over ``model_dim``.

    Queries and keys/values are (batch, tokens, model_dim); per head the
    weights softmax(QK^T / sqrt(model_dim/heads)) form a distribution over
    key positions. The most recent weights are kept on ``last_weights`` for
    inspection (data only, not part of the graph).
    """

    def __init__(self, heads: int, model_dim: int, rng: np.random.Generator | None = None):
        if model_dim % heads != 0:
            raise ConfigError(
                f"model_dim {model_dim} not divisible by heads {heads}"
            )
        self.heads = heads
        self.model_dim = model_dim
        self.head_dim = model_dim // heads
        self.w_q = Linear(model_dim, model_dim)
        self.w_k = Linear(model_dim, model_dim)
        self.w_v = Linear(model_dim, model_dim)
        self.w_o = Linear(model_dim, model_dim)
        self.last_weights: np.ndarray | None = None
        if rng is not None:
            self.init_params(rng)

    def _split_heads(self, x: Tensor, batch: int, tokens: int) -> Tensor:
        x = ops.reshape(x, (batch, tokens, self.heads, self.head_dim))
        return ops.transpose(x, (0, 2, 1, 3))  # (B, h, T, hd)

    def forward(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        squeeze = queries.ndim == 2
        if squeeze:
            queries = ops.reshape(queries, (1,) + queries.shape)
            keys_values = ops.reshape(keys_values, (1,) + keys_values.shape)
        b, nq, _ = queries.shape
        nk = keys_values.shape[1]
        q = self._split_heads(self.w_q(queries), b, nq)
        k = self._split_heads(self.w_k(keys_values), b, nk)
        v = self._split_heads(self.w_v(keys_values), b, nk)
        scores = ops.scale(
            ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
            1.0 / math.sqrt(self.head_dim),
        )
        att = ops.softmax(scores, axis=-1)  # (B, h, nq, nk)
        self.last_weights = att.data.copy()
        ctx = ops.matmul(att, v)  # (B, h, nq, hd)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, nq, self.model_dim))
        out = self.w_o(ctx)
        if squeeze:
            out = ops.reshape(out, (nq, self.model_dim))
        return out

    __call__ = forward


class Mlp(Module):
    """Two-layer relu MLP used inside transformer blocks."""

    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))

    __call__ = forward
