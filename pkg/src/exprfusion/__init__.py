"""Concatenation-fusion facial expression classifier on a small numpy autodiff core."""

from .attention import AttentionConfig, attention_parameter_count, multi_head_self_attention, scaled_dot_product
from .data import (
    LABEL_NAMES, SEQ_LEN, ExpressionLabel, generate_fixture, load_manifest, make_batches, window_sequences,
)
from .encoder import EncoderConfig, encoder_forward, encoder_parameter_count
from .metrics import ConfusionMatrix, macro_f1
from .model import BackboneSpec, FusionHeadConfig, FusionModel, ModelConfig, model_parameter_count, predict
from .tensor import Tensor, backward, make_rng
from .training import Adam, AdamConfig, FocalLossConfig, LrFinderConfig, TrainConfig, fit, focal_loss, lr_range_test

__version__ = "0.1.0"
