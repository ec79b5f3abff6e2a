import math

import numpy as np
import pytest

from smerf import autodiff as ad
from smerf.transformer import (
    EncoderConfig, MapFeatures, NumericError, attention_weights, cross_attention_graph, encode, encode_graph,
    init_fusion_weights, init_weights, map_cross_attention, parameter_count,
)

from oracles import central_difference, max_relative_error


def dense_cross_attention(bev, feats, w, heads, mask=None):
    """Straight-line softmax/matmul evaluation, one head at a time."""
    H = bev.shape[1]
    dh = H // heads
    q = bev @ w["Wq"] + w["bq"]
    k = feats @ w["Wk"] + w["bk"]
    v = feats @ w["Wv"] + w["bv"]
    ctx = np.zeros((bev.shape[0], H))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(bev.shape[0]):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(len(feats))])
            if mask is not None:
                logits = np.where(mask, logits, -np.inf)
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            ctx[i, sl] = sum(p[j] * v[j, sl] for j in range(len(feats)))
    return bev + ctx @ w["Wo"] + w["bo"]


def small_encoder(L=2, H=16, heads=4, width=10):
    return EncoderConfig(L=L, H=H, heads=heads, input_width=width)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def test_init_bound_fan_in_four():
    cfg = EncoderConfig(L=2, H=4, heads=2, ffn_width=4, input_width=4)
    w = init_weights(cfg, 0)
    for name, arr in w.items():
        if "gamma" not in name:
            assert np.all(np.abs(arr) <= 0.5), name


def test_init_deterministic():
    cfg = small_encoder()
    a, b, c = init_weights(cfg, 3), init_weights(cfg, 3), init_weights(cfg, 4)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith("W") or "W" in k)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(H=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(L=0)
    assert EncoderConfig().ffn_width == 512
    assert EncoderConfig().input_width == 359


def test_parameter_count():
    cfg = EncoderConfig(L=1, H=8, heads=2, input_width=5)
    w = init_weights(cfg, 0)
    attn = 4 * (8 * 8 + 8)
    ffn = 8 * 16 + 16 + 16 * 8 + 8
    assert parameter_count(w) == 5 * 8 + 8 + attn + ffn + 4 * 8


# ---------------------------------------------------------------------------
# Encoder forward
# ---------------------------------------------------------------------------

def test_encode_empty():
    cfg = small_encoder()
    out = encode(np.zeros((0, 10), np.float32), None, init_weights(cfg, 0), cfg)
    assert out.data.shape == (0, 16) and out.M == 0


def test_encode_single_row():
    cfg = small_encoder()
    w = init_weights(cfg, 0)
    out = encode(np.random.default_rng(0).normal(size=(1, 10)), None, w, cfg)
    assert out.data.shape == (1, 16) and np.all(np.isfinite(out.data))
    p = attention_weights(np.ones((1, 16)), np.ones((1, 16)), w, "layers.0.attn.", 4)
    assert np.array_equal(p, np.ones((4, 1, 1)))


def test_encode_single_row_is_value_path():
    cfg = EncoderConfig(L=1, H=8, heads=2, input_width=5)
    w = init_weights(cfg, 1, np.float64)
    x = np.random.default_rng(1).normal(size=(1, 5))
    h = x @ w["input.W"] + w["input.b"]
    a = (h @ w["layers.0.attn.Wv"] + w["layers.0.attn.bv"]) @ w["layers.0.attn.Wo"] + w["layers.0.attn.bo"]

    def ln(z, g, b):
        mu = z.mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(((z - mu) ** 2).mean(-1, keepdims=True) + 1e-5) * g + b

    h = ln(h + a, w["layers.0.ln1.gamma"], w["layers.0.ln1.beta"])
    f1 = h @ w["layers.0.ffn.W1"] + w["layers.0.ffn.b1"]
    f1 = 0.5 * f1 * (1 + np.tanh(math.sqrt(2 / math.pi) * (f1 + 0.044715 * f1 ** 3)))
    h = ln(h + f1 @ w["layers.0.ffn.W2"] + w["layers.0.ffn.b2"], w["layers.0.ln2.gamma"], w["layers.0.ln2.beta"])
    assert np.allclose(encode(x, None, w, cfg).data, h, atol=1e-12)


def test_encode_shape_errors():
    cfg = small_encoder()
    w = init_weights(cfg, 0)
    with pytest.raises(ValueError):
        encode(np.zeros((3, 9)), None, w, cfg)
    with pytest.raises(ValueError):
        encode(np.zeros((3, 10)), np.ones(2, bool), w, cfg)


def test_encode_numeric_error_names_layer():
    cfg = small_encoder()
    w = init_weights(cfg, 0)
    w["layers.1.ffn.W2"][0, 0] = np.inf
    with pytest.raises(NumericError, match="layer 1"), np.errstate(all="ignore"):
        encode(np.ones((2, 10), np.float32), None, w, cfg)


def test_encode_deterministic_bitwise():
    cfg = small_encoder()
    w = init_weights(cfg, 0)
    x = np.random.default_rng(5).normal(size=(4, 10)).astype(np.float32)
    assert encode(x, None, w, cfg).data.tobytes() == encode(x, None, w, cfg).data.tobytes()


def test_batched_encode_matches_single():
    cfg = small_encoder()
    P = {k: ad.Tensor(v) for k, v in init_weights(cfg, 0, np.float64).items()}
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 4, 10))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], bool)
    with ad.no_grad():
        batched = encode_graph(X, mask, P, cfg).data
        for b in range(3):
            single = encode_graph(X[b], mask[b], P, cfg).data
            assert np.allclose(batched[b][mask[b]], single[mask[b]], atol=1e-12)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def test_fusion_all_masked_is_bitwise_identity():
    bev = np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32)
    feats = MapFeatures(np.random.default_rng(1).normal(size=(3, 16)).astype(np.float32), np.zeros(3, bool))
    out = map_cross_attention(bev, feats, init_fusion_weights(16, 0))
    assert out.tobytes() == bev.tobytes()


def test_fusion_empty_map_is_identity():
    bev = np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32)
    out = map_cross_attention(bev, MapFeatures(np.zeros((0, 16), np.float32), np.zeros(0, bool)),
                              init_fusion_weights(16, 0))
    assert out.tobytes() == bev.tobytes()


def test_fusion_zero_output_projection_is_identity():
    w = init_fusion_weights(16, 0)
    w["Wo"][:] = 0
    w["bo"][:] = 0
    bev = np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32)
    feats = MapFeatures(np.random.default_rng(1).normal(size=(3, 16)).astype(np.float32), np.ones(3, bool))
    assert np.array_equal(map_cross_attention(bev, feats, w), bev)


def test_fusion_two_queries_three_rows_by_hand():
    H = 4
    w = {
        "Wq": 0.1 * np.arange(16, dtype=float).reshape(4, 4) / 16, "bq": np.array([0.01, 0, -0.01, 0.02]),
        "Wk": 0.2 * np.eye(4), "bk": np.zeros(4),
        "Wv": np.array([[0.1, 0, 0, 0.2], [0, 0.3, 0, 0], [0, 0, 0.1, 0], [0.05, 0, 0, 0.1]]), "bv": np.full(4, 0.01),
        "Wo": 0.5 * np.eye(4), "bo": np.array([0.0, 0.1, 0.0, -0.1]),
    }
    bev = np.array([[1.0, 0.0, -1.0, 0.5], [0.2, 0.4, 0.6, 0.8]])
    feats = np.array([[0.5, 0.5, 0.0, 0.0], [-1.0, 0.0, 1.0, 2.0], [0.3, -0.3, 0.9, 0.0]])
    for heads in (1, 2):
        got = map_cross_attention(bev, MapFeatures(feats, np.ones(3, bool)), w, heads=heads)
        assert np.allclose(got, dense_cross_attention(bev, feats, w, heads), atol=1e-14)
    mask = np.array([True, False, True])
    got = map_cross_attention(bev, MapFeatures(feats, mask), w, heads=2)
    assert np.allclose(got, dense_cross_attention(bev, feats, w, 2, mask), atol=1e-14)


def test_fusion_width_mismatch():
    with pytest.raises(ValueError):
        map_cross_attention(np.zeros((2, 8)), MapFeatures(np.zeros((3, 16)), np.ones(3, bool)),
                            init_fusion_weights(16, 0))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    w = init_fusion_weights(16, 0, np.float64)
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    p = attention_weights(rng.normal(size=(7, 16)), rng.normal(size=(6, 16)), w, "", 4, mask)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[..., ~mask] == 0.0)


def test_batched_fusion_gates_per_item():
    rng = np.random.default_rng(0)
    P = {k: ad.Tensor(v) for k, v in init_fusion_weights(8, 0, np.float64).items()}
    bev = rng.normal(size=(2, 3, 8))
    feats = rng.normal(size=(2, 4, 8))
    mask = np.array([[1, 1, 0, 0], [0, 0, 0, 0]], bool)
    with ad.no_grad():
        out = cross_attention_graph(bev, feats, mask, P, 2).data
        single = cross_attention_graph(bev[0], feats[0], mask[0], P, 2).data
    assert out[1].tobytes() == bev[1].tobytes()
    assert np.allclose(out[0], single, atol=1e-12)


# ---------------------------------------------------------------------------
# Gradients (central differences, 64-bit)
# ---------------------------------------------------------------------------

def test_encoder_and_fusion_gradients_small():
    cfg = EncoderConfig(L=1, H=8, heads=2, input_width=6)
    w = init_weights(cfg, 0, np.float64)
    w.update(init_fusion_weights(8, 1, np.float64, prefix="fuse."))
    rng = np.random.default_rng(0)
    arrays = dict(w)
    arrays["x"] = rng.normal(size=(3, 6))
    arrays["bev"] = rng.normal(size=(2, 8))
    mask = np.array([1, 1, 0], bool)
    up = rng.normal(size=(2, 8))

    def build(P):
        feats = encode_graph(P["x"], mask, P, cfg)
        return cross_attention_graph(P["bev"], feats, mask, P, 2, "fuse.")

    def loss():
        with ad.no_grad():
            return float(np.sum(build({k: ad.Tensor(v) for k, v in arrays.items()}).data * up))

    P = ad.parameters(arrays)
    grads = ad.gradients(build(P), P, up)
    numeric = central_difference(loss, arrays)
    for k in arrays:
        assert max_relative_error(grads[k], numeric[k]) < 1e-4, k
    # the masked row reaches nothing downstream
    assert np.array_equal(grads["x"][2], np.zeros(6))
