"""Post-norm transformer encoder branch: self-attention then a ReLU feed-forward net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    MODEL_DIM, AttentionLayerWeights, attention_layer, attention_parameter_count,
    AttentionConfig, check_layer_shapes, init_attention_layer, sinusoidal_encoding,
)
from .errors import ConfigError, DimensionError
from .tensor import Tensor, add, dropout, glorot_uniform, layer_norm, matmul, ones, relu, zeros

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    depth: int = 1
    num_heads: int = 2
    head_dim: int = 64
    ff_dim: int = 512
    dropout: float = 0.0
    model_dim: int = MODEL_DIM
    positional_encoding: bool = False

    def __post_init__(self):
        for name in ("depth", "num_heads", "head_dim", "ff_dim", "model_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"encoder.{name} must be a positive integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"encoder.dropout must lie in [0, 1), got {self.dropout}")

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.depth, self.num_heads, self.head_dim, self.dropout, self.model_dim)


@dataclass
class EncoderLayerWeights:
    attn: AttentionLayerWeights
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.attn.named_parameters(f"{prefix}.attn")
        out += [(f"{prefix}.{k}", v) for k, v in vars(self).items() if k != "attn"]
        return out


@dataclass
class EncoderWeights:
    layers: list[EncoderLayerWeights]

    def named_parameters(self, prefix: str = "encoder") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.{i}"))
        return out


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderWeights:
    d, f = cfg.model_dim, cfg.ff_dim
    layers = []
    for _ in range(cfg.depth):
        attn = init_attention_layer(d, cfg.num_heads * cfg.head_dim, rng)
        layers.append(EncoderLayerWeights(
            attn=attn,
            w1=glorot_uniform(rng, d, f), b1=zeros(f),
            w2=glorot_uniform(rng, f, d), b2=zeros(d),
            ln1_gain=ones(d), ln1_bias=zeros(d),
            ln2_gain=ones(d), ln2_bias=zeros(d),
        ))
    return EncoderWeights(layers)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"feed_forward: x {x.shape}, W1 {w1.shape}, W2 {w2.shape}")
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


def encoder_layer(x: Tensor, w: EncoderLayerWeights, cfg: EncoderConfig,
                  training: bool = False, rng=None) -> Tensor:
    attended = attention_layer(x, w.attn, cfg.num_heads, cfg.dropout, training, rng)
    h = layer_norm(add(x, dropout(attended, cfg.dropout, training, rng)), w.ln1_gain, w.ln1_bias, LN_EPS)
    ff = feed_forward(h, w.w1, w.b1, w.w2, w.b2)
    return layer_norm(add(h, dropout(ff, cfg.dropout, training, rng)), w.ln2_gain, w.ln2_bias, LN_EPS)


def encoder_forward(x: Tensor, w: EncoderWeights, cfg: EncoderConfig,
                    training: bool = False, rng=None) -> Tensor:
    if x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"input width {x.shape[-1]} != model_dim {cfg.model_dim}")
    if len(w.layers) != cfg.depth:
        raise ConfigError(f"weights have {len(w.layers)} layers, config depth is {cfg.depth}")
    if cfg.positional_encoding:
        x = add(x, Tensor(sinusoidal_encoding(x.shape[-2], cfg.model_dim)))
    for layer in w.layers:
        check_layer_shapes(layer.attn, cfg.model_dim, cfg.num_heads * cfg.head_dim)
        if layer.w1.shape != (cfg.model_dim, cfg.ff_dim) or layer.w2.shape != (cfg.ff_dim, cfg.model_dim):
            raise ConfigError(f"feed-forward weights {layer.w1.shape}/{layer.w2.shape} disagree with config")
        x = encoder_layer(x, layer, cfg, training, rng)
    return x


def encoder_parameter_count(cfg: EncoderConfig) -> int:
    d, f = cfg.model_dim, cfg.ff_dim
    per_layer = d * f + f + f * d + d + 2 * (2 * d)
    return attention_parameter_count(cfg.attention_config()) + cfg.depth * per_layer
