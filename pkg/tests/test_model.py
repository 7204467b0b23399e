import json
import math

import numpy as np
import pytest

from oracles import gradcheck
from restad import tensor as T
from restad.errors import ConfigError, ContractError, DimensionError
from restad.model import (
    ModelConfig,
    RestadModel,
    load_checkpoint,
    rbf_forward,
    save_checkpoint,
    sinusoidal_table,
)
from restad.initialization import random_init
from restad.tensor import Tape, Tensor


def small_config(**overrides):
    base = dict(input_dim=2, window_len=8, d_model=4, ffn_dim=6, n_heads=2,
                n_layers=3, rbf_enabled=True, rbf_position=2, n_centers=4,
                seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(d_model=6, n_heads=4)
    with pytest.raises(ConfigError):
        small_config(rbf_position=4)
    with pytest.raises(ConfigError):
        small_config(rbf_position=0)
    with pytest.raises(ConfigError):
        small_config(n_centers=3)  # feeds layer 3 attention, 3 % 2 != 0
    with pytest.raises(ConfigError):
        small_config(dropout=1.0)
    with pytest.raises(ConfigError):
        small_config(input_dim=0)
    # n_centers need not divide n_heads when the RBF sits after the last layer
    small_config(rbf_position=3, n_centers=3)


def test_positional_encoding_at_position_zero():
    pe = sinusoidal_table(4, 6)
    assert np.array_equal(pe[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_positional_encoding_values():
    pe = sinusoidal_table(3, 4)
    assert abs(pe[2, 0] - math.sin(2.0)) <= 1e-15
    assert abs(pe[2, 1] - math.cos(2.0)) <= 1e-15
    assert abs(pe[2, 2] - math.sin(2.0 / 100.0)) <= 1e-15


def test_embed_zero_projection_yields_positional_table():
    model = RestadModel(small_config(rbf_enabled=False))
    model.params["embed.W"].data[...] = 0.0
    model.params["embed.b"].data[...] = 0.0
    x = np.zeros((3, 8, 2))
    out = model.embed(x).data
    assert np.array_equal(out, np.broadcast_to(model.pe, (3, 8, 4)))


def test_embed_identity_padded_projection():
    model = RestadModel(small_config(rbf_enabled=False))
    w = np.zeros((2, 4))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    model.params["embed.W"].data[...] = w
    model.params["embed.b"].data[...] = 0.0
    x = np.zeros((1, 8, 2))
    x[0, :, 0] = 1.0
    out = model.embed(x).data
    want = np.tile([1.0, 0.0, 0.0, 0.0], (8, 1)) + model.pe
    assert np.allclose(out[0], want, atol=1e-15)


def test_embed_rejects_sequences_longer_than_table():
    model = RestadModel(small_config())
    with pytest.raises(ContractError):
        model.embed(np.zeros((1, 9, 2)))
    with pytest.raises(DimensionError):
        model.embed(np.zeros((1, 8, 3)))


def _layer_norm_np(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_encoder_layer_with_zero_sublayers_is_double_layer_norm():
    model = RestadModel(small_config(rbf_enabled=False, n_layers=1, rbf_position=1))
    for name, p in model.params.items():
        if "attn" in name or "ffn" in name:
            p.data[...] = 0.0
        elif name.endswith("gain"):
            p.data[...] = 1.0
        elif name.endswith("bias") and "ln" in name:
            p.data[...] = 0.0
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 5, 4))
    out = model.encoder_layer(Tensor(h), 1).data
    assert np.allclose(out, _layer_norm_np(_layer_norm_np(h)), atol=1e-12)


def test_single_position_attention_weight_is_exactly_one():
    # with T=1 the softmax runs over one key, so the context equals v exactly
    model = RestadModel(small_config(rbf_enabled=False, n_layers=1, rbf_position=1))
    rng = np.random.default_rng(1)
    h = rng.standard_normal((2, 1, 4))
    p = {k: v.data for k, v in model.params.items()}
    v = h @ p["layer1.attn.Wv"] + p["layer1.attn.bv"]
    proj = v @ p["layer1.attn.Wo"] + p["layer1.attn.bo"]
    h1 = model.encoder_layer(Tensor(h), 1).data
    inner = np.maximum(_layer_norm_np(h + proj) @ p["layer1.ffn.W1"] + p["layer1.ffn.b1"], 0.0)
    want = _layer_norm_np(_layer_norm_np(h + proj) + inner @ p["layer1.ffn.W2"] + p["layer1.ffn.b2"])
    assert np.allclose(h1, want, atol=1e-12)


def _loop_encoder_layer(h, p, heads, eps=1e-5):
    """Scalar-loop attention + FFN + post-norm, independent of the engine."""
    B, t_len, w = h.shape
    dk = w // heads
    out = np.zeros_like(h)
    for b in range(B):
        q = h[b] @ p["Wq"] + p["bq"]
        k = h[b] @ p["Wk"] + p["bk"]
        v = h[b] @ p["Wv"] + p["bv"]
        ctx = np.zeros((t_len, w))
        for head in range(heads):
            sl = slice(head * dk, (head + 1) * dk)
            for i in range(t_len):
                scores = []
                for j in range(t_len):
                    scores.append(float(q[i, sl] @ k[j, sl]) / math.sqrt(dk))
                mx = max(scores)
                exps = [math.exp(s - mx) for s in scores]
                tot = sum(exps)
                for j in range(t_len):
                    ctx[i, sl] += (exps[j] / tot) * v[j, sl]
        proj = ctx @ p["Wo"] + p["bo"]
        h1 = np.zeros((t_len, w))
        for i in range(t_len):
            row = h[b, i] + proj[i]
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            h1[i] = (row - mu) / math.sqrt(var + eps) * p["g1"] + p["c1"]
        ffn = np.maximum(h1 @ p["W1"] + p["b1"], 0.0) @ p["W2"] + p["b2"]
        for i in range(t_len):
            row = h1[i] + ffn[i]
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            out[b, i] = (row - mu) / math.sqrt(var + eps) * p["g2"] + p["c2"]
    return out


def test_encoder_layer_matches_scalar_loop_oracle():
    for heads, w, seed in [(1, 2, 0), (2, 4, 1), (2, 4, 2)]:
        cfg = small_config(rbf_enabled=False, n_layers=1, rbf_position=1, d_model=w,
                           n_heads=heads, ffn_dim=5, input_dim=1, seed=seed)
        model = RestadModel(cfg)
        rng = np.random.default_rng(seed + 10)
        # hand-set every weight to random values so nothing stays at its init
        for name, p in model.params.items():
            if name.startswith("layer1"):
                p.data[...] = rng.standard_normal(p.data.shape) * 0.7
        mp = model.params
        p = {
            "Wq": mp["layer1.attn.Wq"].data, "bq": mp["layer1.attn.bq"].data,
            "Wk": mp["layer1.attn.Wk"].data, "bk": mp["layer1.attn.bk"].data,
            "Wv": mp["layer1.attn.Wv"].data, "bv": mp["layer1.attn.bv"].data,
            "Wo": mp["layer1.attn.Wo"].data, "bo": mp["layer1.attn.bo"].data,
            "g1": mp["layer1.ln1.gain"].data, "c1": mp["layer1.ln1.bias"].data,
            "W1": mp["layer1.ffn.W1"].data, "b1": mp["layer1.ffn.b1"].data,
            "W2": mp["layer1.ffn.W2"].data, "b2": mp["layer1.ffn.b2"].data,
            "g2": mp["layer1.ln2.gain"].data, "c2": mp["layer1.ln2.bias"].data,
        }
        h = rng.standard_normal((1, 2, w))
        got = model.encoder_layer(Tensor(h), 1).data
        want = _loop_encoder_layer(h, p, heads)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_rbf_forward_identities():
    centers = Tensor(np.array([[1.0, 2.0], [0.0, 0.0]]), requires_grad=True)
    gamma = Tensor(0.7, requires_grad=True)
    layer = random_init(2, 2, seed=0)
    layer.centers.data[...] = centers.data
    layer.gamma.data[...] = gamma.data

    h = np.zeros((1, 1, 2))
    h[0, 0] = [1.0, 2.0]  # exactly the first center
    z = rbf_forward(Tensor(h), layer).data
    assert z[0, 0, 0] == 1.0

    layer.gamma.data[...] = 0.0
    h[0, 0] = [1.0, 1.0]  # squared distance 2 to [0, 0]... and 1 to center 0
    z = rbf_forward(Tensor(h), layer).data
    assert abs(z[0, 0, 1] - math.exp(-1.0)) <= 1e-12


def test_rbf_forward_monotone_in_distance_and_gamma():
    rng = np.random.default_rng(42)
    for _ in range(200):
        layer = random_init(1, 3, seed=rng.integers(1 << 31))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        r1, r2 = np.sort(rng.uniform(0.1, 3.0, size=2))
        h = np.stack([layer.centers.data[0] + r1 * direction,
                      layer.centers.data[0] + r2 * direction])[None]
        z = rbf_forward(Tensor(h), layer).data[0, :, 0]
        assert z[0] > z[1]  # closer point is strictly more similar

        g1, g2 = np.sort(rng.uniform(-2.0, 2.0, size=2))
        layer.gamma.data[...] = g1
        za = rbf_forward(Tensor(h), layer).data[0, 0, 0]
        layer.gamma.data[...] = g2
        zb = rbf_forward(Tensor(h), layer).data[0, 0, 0]
        assert za > zb  # larger gamma shrinks similarity at fixed distance


def test_rbf_forward_range_and_permutation_equivariance():
    rng = np.random.default_rng(3)
    layer = random_init(5, 4, seed=9)
    h = Tensor(rng.standard_normal((2, 3, 4)))
    z = rbf_forward(h, layer).data
    assert np.all(z > 0) and np.all(z <= 1)

    perm = rng.permutation(5)
    permuted = random_init(5, 4, seed=9)
    permuted.centers.data[...] = layer.centers.data[perm]
    z2 = rbf_forward(h, permuted).data
    assert np.array_equal(z2, z[..., perm])


def test_forward_shapes_and_z():
    model = RestadModel(small_config())
    x = np.random.default_rng(0).standard_normal((3, 8, 2))
    xhat, z = model.forward(x)
    assert xhat.data.shape == (3, 8, 2)
    assert z.data.shape == (3, 8, 4)

    vanilla = RestadModel(small_config(rbf_enabled=False))
    xhat, z = vanilla.forward(x)
    assert xhat.data.shape == (3, 8, 2)
    assert z is None


def test_forward_rbf_at_last_layer_feeds_head_directly():
    model = RestadModel(small_config(rbf_position=3, n_centers=5))
    x = np.random.default_rng(1).standard_normal((2, 8, 2))
    xhat, z = model.forward(x)
    assert z.data.shape == (2, 8, 5)
    assert model.params["head.W"].data.shape == (5, 2)


def test_forward_width_transition_when_m_differs():
    model = RestadModel(small_config(d_model=8, n_heads=2, n_centers=4))
    assert model.layer_width(2) == 8
    assert model.layer_width(3) == 4
    x = np.random.default_rng(2).standard_normal((2, 8, 2))
    xhat, z = model.forward(x)
    assert xhat.data.shape == (2, 8, 2) and z.data.shape == (2, 8, 4)


def test_forward_rejects_non_finite_input():
    model = RestadModel(small_config())
    x = np.zeros((1, 8, 2))
    x[0, 3, 1] = np.nan
    with pytest.raises(ContractError):
        model.forward(x)


def test_forward_deterministic_per_seed():
    x = np.random.default_rng(5).standard_normal((2, 8, 2))
    a1, z1 = RestadModel(small_config(seed=7)).forward(x)
    a2, z2 = RestadModel(small_config(seed=7)).forward(x)
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(z1.data, z2.data)
    a3, _ = RestadModel(small_config(seed=8)).forward(x)
    assert not np.array_equal(a1.data, a3.data)


def test_full_model_gradients_match_finite_differences():
    cfg = small_config(window_len=4)
    model = RestadModel(cfg)
    x = np.random.default_rng(11).standard_normal((2, 4, 2))

    def build():
        xhat, _ = model.forward(x)
        diff = T.sub(xhat, Tensor(x))
        return T.scale_by_scalar(T.tensor_sum(T.square(diff)), 1.0 / 2.0)

    err = gradcheck(build, list(model.params.values()))
    assert err < 1e-4


def test_dropout_only_active_when_rng_supplied():
    cfg = small_config(dropout=0.5)
    model = RestadModel(cfg)
    x = np.random.default_rng(0).standard_normal((1, 8, 2))
    a, _ = model.forward(x)
    b, _ = model.forward(x)
    assert np.array_equal(a.data, b.data)  # inference path ignores dropout
    c, _ = model.forward(x, dropout_rng=np.random.default_rng(0))
    assert not np.array_equal(a.data, c.data)
    d, _ = model.forward(x, dropout_rng=np.random.default_rng(0))
    assert np.array_equal(c.data, d.data)


def test_checkpoint_round_trip_and_byte_identity(tmp_path):
    model = RestadModel(small_config(seed=3))
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_checkpoint(model, p1)
    restored = load_checkpoint(p1)
    for name, p in model.params.items():
        assert np.array_equal(p.data, restored.params[name].data), name
    save_checkpoint(restored, p2)
    assert p1.read_bytes() == p2.read_bytes()

    x = np.random.default_rng(4).standard_normal((2, 8, 2))
    a, _ = model.forward(x)
    b, _ = restored.forward(x)
    assert np.array_equal(a.data, b.data)


def test_checkpoint_rejects_unknown_schema(tmp_path):
    model = RestadModel(small_config())
    path = tmp_path / "ck.json"
    save_checkpoint(model, path)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_latent_extraction_matches_truncated_forward():
    model = RestadModel(small_config(rbf_enabled=False))
    x = np.random.default_rng(6).standard_normal((2, 8, 2))
    h2 = model.forward_latents(x, upto=2)
    assert h2.shape == (2, 8, 4)
    h = model.embed(x)
    h = model.encoder_layer(h, 1)
    h = model.encoder_layer(h, 2)
    assert np.array_equal(h.data, h2)
