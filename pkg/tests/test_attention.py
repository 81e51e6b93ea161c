import math

import numpy as np
import pytest

from conftest import check_gradients
from exprfusion.attention import (
    AttentionConfig, attention_parameter_count, init_attention, multi_head_self_attention,
    scaled_dot_product, sinusoidal_encoding,
)
from exprfusion.errors import ConfigError, DimensionError
from exprfusion.tensor import Tensor, tsum


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loop_attention(x, layer, num_heads):
    """Per-head loop re-implementation working on plain arrays."""
    dh = layer.wq.shape[1] // num_heads
    q = x @ layer.wq.data + layer.bq.data
    k = x @ layer.wk.data + layer.bk.data
    v = x @ layer.wv.data + layer.bv.data
    heads = []
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        s = len(x)
        out = np.zeros((s, dh))
        for i in range(s):
            logits = np.array([qh[i] @ kh[j] for j in range(s)]) / math.sqrt(dh)
            w = np_softmax(logits)
            out[i] = sum(w[j] * vh[j] for j in range(s))
        heads.append(out)
    return np.concatenate(heads, axis=1) @ layer.wo.data + layer.bo.data


def random_layer_weights(weights, rng, scale=0.5):
    for _, p in weights.named_parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return weights


class TestScaledDotProduct:
    def test_single_position(self, rng):
        q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        out, w = scaled_dot_product(q, k, v)
        np.testing.assert_array_equal(w.data, [[1.0]])
        np.testing.assert_allclose(out.data, v.data, rtol=0, atol=1e-15)

    def test_zero_logits_give_uniform_weights(self, rng):
        q = Tensor(np.zeros((5, 3)))
        k = Tensor(rng.normal(size=(5, 3)))
        v = Tensor(rng.normal(size=(5, 2)))
        out, w = scaled_dot_product(q, k, v)
        np.testing.assert_allclose(w.data, np.full((5, 5), 0.2), atol=1e-15)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-14)

    def test_two_position_hand_example(self):
        out, w = scaled_dot_product(Tensor([[1.0], [2.0]]), Tensor([[1.0], [0.0]]), Tensor([[10.0], [20.0]]))
        e = math.e
        np.testing.assert_allclose(w.data[0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        np.testing.assert_allclose(w.data[0], [0.73106, 0.26894], atol=1e-5)
        assert out.data[0, 0] == pytest.approx(12.6894, abs=1e-4)
        assert out.data[1, 0] == pytest.approx(11.1920, abs=1e-4)

    @pytest.mark.parametrize("scale", [1.0, 1000.0, -1000.0])
    def test_rows_sum_to_one(self, rng, scale):
        q = Tensor(rng.normal(size=(2, 6, 4)) * scale)
        k = Tensor(rng.normal(size=(2, 6, 4)) * abs(scale))
        _, w = scaled_dot_product(q, k, Tensor(rng.normal(size=(2, 6, 3))))
        assert np.all(np.isfinite(w.data))
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_shape_errors(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        with pytest.raises(DimensionError):
            scaled_dot_product(a, Tensor(rng.normal(size=(3, 5))), a)
        with pytest.raises(DimensionError):
            scaled_dot_product(a, a, Tensor(rng.normal(size=(2, 4))))
        with pytest.raises(DimensionError):
            scaled_dot_product(Tensor(np.zeros((3, 0))), Tensor(np.zeros((3, 0))), a)

    def test_permutation_equivariance(self, rng):
        q, k, v = (Tensor(rng.normal(size=(6, 3))) for _ in range(3))
        perm = rng.permutation(6)
        out, _ = scaled_dot_product(q, k, v)
        out_p, _ = scaled_dot_product(Tensor(q.data[perm]), Tensor(k.data[perm]), Tensor(v.data[perm]))
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-12)

    def test_gradients(self, rng):
        q, k, v = (Tensor(rng.normal(size=(4, 3)), requires_grad=True) for _ in range(3))
        c = rng.normal(size=(4, 3))
        check_gradients(lambda: tsum(scaled_dot_product(q, k, v)[0] * Tensor(c)), [q, k, v], rng)


class TestMultiHead:
    def small(self, rng, heads=2, depth=1):
        cfg = AttentionConfig(depth=depth, num_heads=heads, head_dim=3, model_dim=5)
        return cfg, random_layer_weights(init_attention(cfg, rng), rng)

    def test_matches_per_head_loop(self, rng):
        cfg, w = self.small(rng)
        x = rng.normal(size=(3, 5))
        out = multi_head_self_attention(Tensor(x), w, cfg)
        np.testing.assert_allclose(out.data, loop_attention(x, w.layers[0], 2), rtol=0, atol=1e-10)

    def test_single_position_is_value_path(self, rng):
        cfg, w = self.small(rng)
        x = rng.normal(size=(1, 5))
        layer = w.layers[0]
        expected = (x @ layer.wv.data + layer.bv.data) @ layer.wo.data + layer.bo.data
        out = multi_head_self_attention(Tensor(x), w, cfg)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_single_head_wraps_scaled_dot_product(self, rng):
        cfg, w = self.small(rng, heads=1)
        x = rng.normal(size=(4, 5))
        layer = w.layers[0]
        proj = [Tensor(x @ getattr(layer, f"w{n}").data + getattr(layer, f"b{n}").data) for n in "qkv"]
        mixed, _ = scaled_dot_product(*proj)
        expected = mixed.data @ layer.wo.data + layer.bo.data
        np.testing.assert_allclose(multi_head_self_attention(Tensor(x), w, cfg).data, expected, atol=1e-12)

    def test_batched_matches_unbatched(self, rng):
        cfg, w = self.small(rng)
        x = rng.normal(size=(3, 4, 5))
        out = multi_head_self_attention(Tensor(x), w, cfg).data
        for b in range(3):
            np.testing.assert_allclose(out[b], multi_head_self_attention(Tensor(x[b]), w, cfg).data, atol=1e-13)

    def test_depth_two_stacks_layers(self, rng):
        cfg, w = self.small(rng, depth=2)
        x = rng.normal(size=(3, 5))
        expected = loop_attention(loop_attention(x, w.layers[0], 2), w.layers[1], 2)
        np.testing.assert_allclose(multi_head_self_attention(Tensor(x), w, cfg).data, expected, atol=1e-10)

    def test_permutation_equivariance(self, rng):
        cfg, w = self.small(rng)
        x = rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        out = multi_head_self_attention(Tensor(x), w, cfg).data
        np.testing.assert_allclose(multi_head_self_attention(Tensor(x[perm]), w, cfg).data, out[perm], atol=1e-12)

    def test_positional_encoding_breaks_equivariance(self, rng):
        cfg = AttentionConfig(num_heads=2, head_dim=3, model_dim=6, positional_encoding=True)
        w = random_layer_weights(init_attention(cfg, rng), rng)
        x = rng.normal(size=(4, 6))
        perm = np.array([1, 0, 2, 3])
        out = multi_head_self_attention(Tensor(x), w, cfg).data
        assert not np.allclose(multi_head_self_attention(Tensor(x[perm]), w, cfg).data, out[perm])

    def test_sinusoidal_encoding_values(self):
        pe = sinusoidal_encoding(3, 4)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
        np.testing.assert_allclose(pe[2], [math.sin(2), math.cos(2), math.sin(0.02), math.cos(0.02)], atol=1e-15)

    def test_weight_shape_disagreement(self, rng):
        cfg, w = self.small(rng)
        bigger = AttentionConfig(num_heads=2, head_dim=4, model_dim=5)
        with pytest.raises(ConfigError):
            multi_head_self_attention(Tensor(rng.normal(size=(3, 5))), w, bigger)
        with pytest.raises(ConfigError):
            multi_head_self_attention(Tensor(rng.normal(size=(3, 5))), w, AttentionConfig(2, 2, 3, model_dim=5))
        with pytest.raises(DimensionError):
            multi_head_self_attention(Tensor(rng.normal(size=(3, 4))), w, cfg)

    def test_dropout_only_in_training(self, rng):
        cfg = AttentionConfig(num_heads=2, head_dim=3, model_dim=5, dropout=0.5)
        w = random_layer_weights(init_attention(cfg, rng), rng)
        x = Tensor(rng.normal(size=(6, 5)))
        a = multi_head_self_attention(x, w, cfg).data
        np.testing.assert_array_equal(a, multi_head_self_attention(x, w, cfg).data)
        b = multi_head_self_attention(x, w, cfg, training=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(a, b)

    def test_gradients(self, rng):
        cfg, w = self.small(rng)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        c = Tensor(rng.normal(size=(4, 5)))
        named = dict(w.named_parameters())
        for p in named.values():
            p.requires_grad = True
        # key bias shifts every logit in a row equally, so its true gradient is zero
        params = [p for n, p in named.items() if not n.endswith("bk")]
        check_gradients(lambda: tsum(multi_head_self_attention(x, w, cfg) * c), [x, *params], rng,
                        probes_per_tensor=2)
        np.testing.assert_allclose(named["attention.0.bk"].grad, 0.0, atol=1e-12)

    @pytest.mark.parametrize("bad", [dict(num_heads=0), dict(head_dim=0), dict(depth=0), dict(dropout=1.0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            AttentionConfig(**bad)


class TestParameterCount:
    def test_default_matches_formula(self):
        d, inner = 888, 2 * 64
        expected = 3 * (d * inner + inner) + (inner * d + d)
        assert expected == 455_928
        assert attention_parameter_count(AttentionConfig()) == expected

    def test_matches_constructed_weights(self, rng):
        cfg = AttentionConfig(depth=2, num_heads=3, head_dim=2, model_dim=7)
        w = init_attention(cfg, rng)
        assert sum(p.data.size for _, p in w.named_parameters()) == attention_parameter_count(cfg)

    def test_minimal(self):
        assert attention_parameter_count(AttentionConfig(1, 1, 1, model_dim=1)) == 8

    def test_linear_in_depth(self):
        assert attention_parameter_count(AttentionConfig(depth=2)) == 2 * attention_parameter_count(AttentionConfig())
