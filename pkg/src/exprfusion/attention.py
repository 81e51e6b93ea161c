"""Scaled dot-product attention and the multi-head self-attention branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor, add, dropout, glorot_uniform, matmul, reshape, softmax, swapaxes, zeros,
)

MODEL_DIM = 888


@dataclass
class AttentionConfig:
    depth: int = 1
    num_heads: int = 2
    head_dim: int = 64
    dropout: float = 0.0
    model_dim: int = MODEL_DIM
    positional_encoding: bool = False

    def __post_init__(self):
        for name in ("depth", "num_heads", "head_dim", "model_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"attention.{name} must be a positive integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"attention.dropout must lie in [0, 1), got {self.dropout}")

    @property
    def inner_dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclass
class AttentionLayerWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", v) for k, v in vars(self).items()]


@dataclass
class AttentionWeights:
    layers: list[AttentionLayerWeights]

    def named_parameters(self, prefix: str = "attention") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.{i}"))
        return out


def init_attention_layer(model_dim: int, inner_dim: int, rng: np.random.Generator) -> AttentionLayerWeights:
    """Glorot-uniform projections, zero biases."""
    return AttentionLayerWeights(
        wq=glorot_uniform(rng, model_dim, inner_dim), bq=zeros(inner_dim),
        wk=glorot_uniform(rng, model_dim, inner_dim), bk=zeros(inner_dim),
        wv=glorot_uniform(rng, model_dim, inner_dim), bv=zeros(inner_dim),
        wo=glorot_uniform(rng, inner_dim, model_dim), bo=zeros(model_dim),
    )


def init_attention(cfg: AttentionConfig, rng: np.random.Generator) -> AttentionWeights:
    return AttentionWeights(
        [init_attention_layer(cfg.model_dim, cfg.inner_dim, rng) for _ in range(cfg.depth)]
    )


def sinusoidal_encoding(seq_len: int, dim: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((seq_len, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, dropout_rate: float = 0.0,
                       training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Return ``(softmax(q k^T / sqrt(d)) v, weights)``.

    Works on ``[..., s, d]`` operands. The returned weights are the
    pre-dropout softmax; dropout, when active, only affects the output.
    """
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise DimensionError(f"sequence lengths differ: {q.shape}, {k.shape}, {v.shape}")
    logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    weights = softmax(logits, axis=-1)
    mixed = dropout(weights, dropout_rate, training, rng)
    return matmul(mixed, v), weights


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, s, width = x.shape
    return swapaxes(reshape(x, (*lead, s, num_heads, width // num_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, s, h * dh))


def attention_layer(x: Tensor, w: AttentionLayerWeights, num_heads: int, dropout_rate: float = 0.0,
                    training: bool = False, rng=None) -> Tensor:
    q = _split_heads(add(matmul(x, w.wq), w.bq), num_heads)
    k = _split_heads(add(matmul(x, w.wk), w.bk), num_heads)
    v = _split_heads(add(matmul(x, w.wv), w.bv), num_heads)
    heads, _ = scaled_dot_product(q, k, v, dropout_rate, training, rng)
    return add(matmul(_merge_heads(heads), w.wo), w.bo)


def check_layer_shapes(w: AttentionLayerWeights, model_dim: int, inner_dim: int) -> None:
    expected = {
        "wq": (model_dim, inner_dim), "wk": (model_dim, inner_dim), "wv": (model_dim, inner_dim),
        "bq": (inner_dim,), "bk": (inner_dim,), "bv": (inner_dim,),
        "wo": (inner_dim, model_dim), "bo": (model_dim,),
    }
    for name, shape in expected.items():
        if getattr(w, name).shape != shape:
            raise ConfigError(f"attention weight {name} has shape {getattr(w, name).shape}, config needs {shape}")


def multi_head_self_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig,
                              training: bool = False, rng=None) -> Tensor:
    """Self-attention over ``x`` of shape ``[..., s, model_dim]``; output has the same shape."""
    if x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"input width {x.shape[-1]} != model_dim {cfg.model_dim}")
    if len(w.layers) != cfg.depth:
        raise ConfigError(f"weights have {len(w.layers)} layers, config depth is {cfg.depth}")
    if cfg.positional_encoding:
        x = add(x, Tensor(sinusoidal_encoding(x.shape[-2], cfg.model_dim)))
    for layer in w.layers:
        check_layer_shapes(layer, cfg.model_dim, cfg.inner_dim)
        x = attention_layer(x, layer, cfg.num_heads, cfg.dropout, training, rng)
    return x


def attention_parameter_count(cfg: AttentionConfig) -> int:
    d, inner = cfg.model_dim, cfg.inner_dim
    return cfg.depth * (3 * (d * inner + inner) + (inner * d + d))
