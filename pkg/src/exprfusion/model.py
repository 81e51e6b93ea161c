"""The fusion classifier: backbone features, attention and encoder branches,
per-frame concatenation, dropout and an 8-way dense head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    MODEL_DIM, AttentionConfig, AttentionWeights, attention_parameter_count, init_attention,
    multi_head_self_attention,
)
from .encoder import EncoderConfig, EncoderWeights, encoder_forward, encoder_parameter_count, init_encoder
from .errors import ConfigError, InputError
from .tensor import (
    Tensor, add, concat_last, conv2d, dropout, glorot_uniform, make_rng, matmul, max_pool2d,
    no_grad, relu, reshape, softmax, zeros,
)

NUM_CLASSES = 8
IMAGE_SIZE = 112
IMAGE_CHANNELS = 3
BACKBONE_VARIANTS = ("precomputed", "conv_stub")


@dataclass
class BackboneSpec:
    """Which feature extractor feeds the branches.

    ``precomputed`` passes 888-wide feature rows through unchanged;
    ``conv_stub`` is a small trainable CNN on 112x112x3 images standing in for
    a pretrained backbone: one conv+ReLU+2x2-pool stage per entry of
    ``conv_channels``, then a dense layer to ``feature_dim``.
    """

    variant: str = "precomputed"
    conv_channels: tuple[int, ...] = (8, 16, 16)
    kernel_size: int = 3
    image_size: int = IMAGE_SIZE
    feature_dim: int = MODEL_DIM

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.variant not in BACKBONE_VARIANTS:
            raise ConfigError(f"backbone.variant must be one of {BACKBONE_VARIANTS}, got {self.variant!r}")
        if self.variant == "conv_stub":
            if not self.conv_channels or min(self.conv_channels) < 1:
                raise ConfigError("backbone.conv_channels needs at least one positive width")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ConfigError("backbone.kernel_size must be a positive odd integer")
            if self.image_size % (2 ** len(self.conv_channels)):
                raise ConfigError("backbone.image_size must be divisible by 2**len(conv_channels)")

    @property
    def flat_dim(self) -> int:
        side = self.image_size // 2 ** len(self.conv_channels)
        return side * side * self.conv_channels[-1]


@dataclass
class FusionHeadConfig:
    dropout_rate: float = 0.5
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"head.dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"head.num_classes is fixed at {NUM_CLASSES}")


@dataclass
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: FusionHeadConfig = field(default_factory=FusionHeadConfig)

    def __post_init__(self):
        dims = {self.backbone.feature_dim, self.attention.model_dim, self.encoder.model_dim}
        if len(dims) != 1:
            raise ConfigError(
                "backbone.feature_dim, attention.model_dim and encoder.model_dim must agree, got "
                f"{self.backbone.feature_dim}, {self.attention.model_dim}, {self.encoder.model_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def fused_dim(self) -> int:
        return 3 * self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneSpec(**d["backbone"]),
            attention=AttentionConfig(**d["attention"]),
            encoder=EncoderConfig(**d["encoder"]),
            head=FusionHeadConfig(**d["head"]),
        )


@dataclass
class ConvStubWeights:
    convs: list[tuple[Tensor, Tensor]]
    dense_w: Tensor
    dense_b: Tensor

    def named_parameters(self, prefix: str = "backbone") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.convs):
            out += [(f"{prefix}.conv{i}.w", w), (f"{prefix}.conv{i}.b", b)]
        return out + [(f"{prefix}.dense.w", self.dense_w), (f"{prefix}.dense.b", self.dense_b)]


def init_conv_stub(spec: BackboneSpec, rng: np.random.Generator) -> ConvStubWeights:
    k = spec.kernel_size
    convs, cin = [], IMAGE_CHANNELS
    for cout in spec.conv_channels:
        w = glorot_uniform(rng, k * k * cin, k * k * cout, shape=(k, k, cin, cout))
        convs.append((w, zeros(cout)))
        cin = cout
    return ConvStubWeights(
        convs, glorot_uniform(rng, spec.flat_dim, spec.feature_dim), zeros(spec.feature_dim)
    )


def backbone_parameter_count(spec: BackboneSpec) -> int:
    if spec.variant == "precomputed":
        return 0
    k, cin, total = spec.kernel_size, IMAGE_CHANNELS, 0
    for cout in spec.conv_channels:
        total += k * k * cin * cout + cout
        cin = cout
    return total + spec.flat_dim * spec.feature_dim + spec.feature_dim


def backbone_extract(frames, spec: BackboneSpec, weights: ConvStubWeights | None = None) -> Tensor:
    """Map a frame batch to ``[n, feature_dim]`` features.

    ``frames`` is ``[n, feature_dim]`` for the precomputed variant and
    ``[n, H, W, 3]`` images with values in [0, 1] for the conv stub.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if spec.variant == "precomputed":
        if x.ndim != 2:
            raise ConfigError(f"precomputed backbone expects [n, {spec.feature_dim}] features, got {x.shape}")
        if x.shape[1] != spec.feature_dim:
            raise InputError(f"feature width {x.shape[1]} != {spec.feature_dim}")
        return x
    if x.ndim != 4:
        raise ConfigError(f"conv_stub backbone expects [n, H, W, 3] images, got {x.shape}")
    if x.shape[1:] != (spec.image_size, spec.image_size, IMAGE_CHANNELS):
        raise InputError(
            f"images must be {spec.image_size}x{spec.image_size}x{IMAGE_CHANNELS}, got {x.shape[1:]}"
        )
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise InputError("pixel values must be normalized to [0, 1]")
    if weights is None:
        raise ConfigError("conv_stub backbone needs weights")
    for w, b in weights.convs:
        x = max_pool2d(relu(conv2d(x, w, b)), 2)
    x = reshape(x, (x.shape[0], -1))
    return add(matmul(x, weights.dense_w), weights.dense_b)


class FusionModel:
    """All learnable state of the classifier plus its configuration.

    ``forward`` maps ``[..., s, 888]`` features (or ``[..., s, H, W, 3]``
    images for the conv stub) to ``[..., s, 8]`` logits.
    """

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | int = 0):
        self.config = config or ModelConfig()
        if not isinstance(rng, np.random.Generator):
            rng = make_rng(rng)
        cfg = self.config
        self.backbone = init_conv_stub(cfg.backbone, rng) if cfg.backbone.variant == "conv_stub" else None
        self.attention: AttentionWeights = init_attention(cfg.attention, rng)
        self.encoder: EncoderWeights = init_encoder(cfg.encoder, rng)
        self.classifier_w = glorot_uniform(rng, cfg.fused_dim, cfg.head.num_classes)
        self.classifier_b = zeros(cfg.head.num_classes)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.backbone.named_parameters() if self.backbone is not None else []
        out += self.attention.named_parameters()
        out += self.encoder.named_parameters()
        out += [("classifier.w", self.classifier_w), ("classifier.b", self.classifier_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def features(self, x: Tensor) -> Tensor:
        spec = self.config.backbone
        if spec.variant == "precomputed":
            if x.shape[-1] != spec.feature_dim:
                raise InputError(f"feature width {x.shape[-1]} != {spec.feature_dim}")
            return x
        image_shape = (spec.image_size, spec.image_size, IMAGE_CHANNELS)
        if x.shape[-1] == int(np.prod(image_shape)) and x.shape[-3:] != image_shape:
            # frames stored as flattened HWC rows
            x = reshape(x, (*x.shape[:-1], *image_shape))
        lead = x.shape[:-3]
        flat = reshape(x, (-1, *x.shape[-3:]))
        return reshape(backbone_extract(flat, spec, self.backbone), (*lead, spec.feature_dim))

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise InputError("input contains NaN or Inf")
        cfg = self.config
        feats = self.features(x)
        attn_out = multi_head_self_attention(feats, self.attention, cfg.attention, training, rng)
        enc_out = encoder_forward(feats, self.encoder, cfg.encoder, training, rng)
        fused = dropout(concat_last([feats, attn_out, enc_out]), cfg.head.dropout_rate, training, rng)
        return add(matmul(fused, self.classifier_w), self.classifier_b)

    __call__ = forward


def fuse_forward(features, model: FusionModel, training: bool = False, rng=None) -> Tensor:
    return model.forward(features, training, rng)


def predict(features, model: FusionModel) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode labels and class probabilities; ties go to the lowest class."""
    with no_grad():
        probs = softmax(model.forward(features, training=False)).data
    return probs.argmax(axis=-1), probs


def model_parameter_count(config: ModelConfig) -> int:
    head = config.fused_dim * config.head.num_classes + config.head.num_classes
    return (
        backbone_parameter_count(config.backbone)
        + attention_parameter_count(config.attention)
        + encoder_parameter_count(config.encoder)
        + head
    )
