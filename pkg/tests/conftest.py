import numpy as np
import pytest

from exprfusion.attention import AttentionConfig
from exprfusion.data import STANDARD_FIXTURE, generate_fixture, window_sequences
from exprfusion.encoder import EncoderConfig
from exprfusion.model import BackboneSpec, ModelConfig
from exprfusion.tensor import no_grad

H = 1e-5


def central_difference(fn, tensor, index, h=H):
    """d fn() / d tensor.data[index] by central differences; fn returns a scalar Tensor."""
    orig = tensor.data[index]
    with no_grad():
        tensor.data[index] = orig + h
        plus = fn().item()
        tensor.data[index] = orig - h
        minus = fn().item()
    tensor.data[index] = orig
    return (plus - minus) / (2 * h)


def rel_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-7)


def probe_indices(rng, shape, count):
    return [tuple(int(rng.integers(d)) for d in shape) for _ in range(count)]


def check_gradients(fn, tensors, rng, probes_per_tensor=4, tol=1e-4):
    """Compare tape gradients of fn() against central differences; return worst relative error."""
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        for idx in probe_indices(rng, t.shape, probes_per_tensor):
            numeric = central_difference(fn, t, idx)
            err = rel_error(analytic[idx], numeric)
            assert err < tol, f"{t} at {idx}: tape {analytic[idx]!r} vs fd {numeric!r} (rel {err:.2e})"
            worst = max(worst, err)
    return worst


def small_model_config(dropout=0.0, variant="precomputed"):
    d = 8
    return ModelConfig(
        backbone=BackboneSpec(variant=variant, feature_dim=d, conv_channels=(2, 3), image_size=8),
        attention=AttentionConfig(num_heads=2, head_dim=3, model_dim=d),
        encoder=EncoderConfig(num_heads=2, head_dim=3, ff_dim=5, model_dim=d),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def standard_fixture(tmp_path_factory):
    path = tmp_path_factory.mktemp("standard_fixture")
    manifest = generate_fixture(path, **STANDARD_FIXTURE, seed=0)
    return manifest, window_sequences(manifest)
