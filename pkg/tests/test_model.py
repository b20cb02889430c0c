import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fetsim import autodiff as ad
from fetsim.autodiff import Tensor
from fetsim.errors import ContractError, DimensionError
from fetsim.linkage import LinkedBatch
from fetsim.model import (DynamicMask, FederatedTransformer, ModelConfig, PositionalEncoding,
                          StepContext, aggregate_concat, dropped_count, dynamic_mask,
                          load_checkpoint, party_dropout, pe_average, positional_encode,
                          save_checkpoint)
from fetsim.nn import MultiHeadAttention
from fetsim.splitavg import PrivacySpec, secure_aggregate


def toy_batch(rng, b=3, k_neighbors=2, dims=(3, 2, 4), key_dims=2):
    """Primary with ``dims[0]`` features, one secondary per remaining entry."""
    return LinkedBatch(
        primary_rows=np.arange(b),
        primary_keys=rng.normal(size=(b, key_dims)),
        primary_features=rng.normal(size=(b, dims[0])),
        labels=rng.integers(0, 2, b),
        neighbor_index=[np.zeros((b, k_neighbors), dtype=int) for _ in dims[1:]],
        neighbor_keys=[rng.normal(size=(b, k_neighbors, key_dims)) for _ in dims[1:]],
        neighbor_features=[rng.normal(size=(b, k_neighbors, d)) for d in dims[1:]],
        sample_ids=[np.zeros((b, k_neighbors), dtype=int) for _ in dims[1:]],
    )


def tiny_config(parties=2, **kw):
    base = dict(hidden_size=4, num_heads=2, num_blocks=1, num_neighbors=2, num_parties=parties,
                key_dims=2, pe_max_frequency=10.0, mask_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


# -- positional encoding --------------------------------------------------------------


def test_pe_identical_keys_identical_codes():
    pe = PositionalEncoding(4, 16, np.random.default_rng(0))
    keys = np.random.default_rng(1).normal(size=(1, 4))
    out = positional_encode(np.vstack([keys, keys]), pe).data
    np.testing.assert_array_equal(out[0], out[1])


def test_pe_zero_keys_zero_projection_gives_base():
    pe = PositionalEncoding(4, 16, np.random.default_rng(0), zero_init=True)
    out = pe(np.zeros((1, 4))).data
    np.testing.assert_array_equal(out, np.concatenate([np.zeros((1, 8)), np.ones((1, 8))], axis=1))


def test_pe_matches_independent_formula():
    rng = np.random.default_rng(2)
    key_dims, hidden, fmax = 3, 12, 1e4
    pe = PositionalEncoding(key_dims, hidden, rng, fmax)
    keys = rng.normal(size=(5, 2, key_dims))
    slots = hidden // 2
    per_dim = math.ceil(slots / key_dims)
    freq = [fmax ** (j / (per_dim - 1)) for j in range(per_dim)]
    base = np.zeros(keys.shape[:-1] + (hidden,))
    for idx in np.ndindex(keys.shape[:-1]):
        for s in range(slots):
            angle = keys[idx][s % key_dims] * freq[s // key_dims]
            base[idx][s] = math.sin(angle)
            base[idx][slots + s] = math.cos(angle)
    w, b = pe.proj.weight.data, pe.proj.bias.data
    ref = base + np.einsum("...i,ij->...j", base, w) + b
    np.testing.assert_allclose(pe(keys).data, ref, atol=1e-9)


def test_pe_key_dimension_mismatch():
    pe = PositionalEncoding(4, 8, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        pe(np.zeros((2, 3)))


def test_pe_average_examples():
    rng = np.random.default_rng(3)
    layers = [PositionalEncoding(2, 4, rng) for _ in range(2)]
    layers[0].proj.weight.data[:] = 1.0
    layers[1].proj.weight.data[:] = 3.0
    pe_average(layers)
    np.testing.assert_array_equal(layers[0].proj.weight.data, np.full((4, 4), 2.0))
    np.testing.assert_array_equal(layers[1].proj.weight.data, np.full((4, 4), 2.0))
    # idempotent on equal inputs
    before = layers[0].state_dict()
    pe_average(layers)
    for name, value in layers[0].state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_pe_average_matches_elementwise_loop():
    rng = np.random.default_rng(4)
    layers = [PositionalEncoding(3, 6, rng) for _ in range(5)]
    states = [layer.state_dict() for layer in layers]
    pe_average(layers)
    for name in states[0]:
        flat = [s[name].reshape(-1) for s in states]
        ref = np.array([sum(f[i] for f in flat) / 5 for i in range(flat[0].size)])
        for layer in layers:
            assert np.max(np.abs(layer.state_dict()[name].reshape(-1) - ref)) < 1e-12


def test_pe_average_structure_mismatch():
    rng = np.random.default_rng(5)
    with pytest.raises(ContractError):
        pe_average([PositionalEncoding(2, 4, rng), PositionalEncoding(2, 6, rng)])


def test_pe_alignment_after_averaging():
    rng = np.random.default_rng(6)
    a, b = PositionalEncoding(2, 8, rng), PositionalEncoding(2, 8, rng)
    keys = rng.normal(size=(40, 2))
    kd = np.linalg.norm(keys[:, None] - keys[None], axis=-1)[np.triu_indices(40, 1)]

    def corr(p, q):
        ed = np.linalg.norm(p(keys).data[:, None] - q(keys).data[None], axis=-1)
        return np.corrcoef(kd, ed[np.triu_indices(40, 1)])[0, 1]

    pe_average([a, b])
    assert corr(a, b) == pytest.approx(corr(a, a), abs=1e-12)


# -- dynamic mask --------------------------------------------------------------------


def test_mask_zero_weights_constant_bias():
    rng = np.random.default_rng(7)
    mlp = DynamicMask(4, 8, rng)
    for layer in mlp.mlp.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    mlp.mlp.layers[-1].bias.data[:] = -2.5
    pe = PositionalEncoding(4, 4, rng)
    out = dynamic_mask(rng.normal(size=(3, 5, 4)), DynamicMask(4, 8, rng), pe, "raw")
    assert out.shape == (3, 5)
    out = dynamic_mask(rng.normal(size=(3, 5, 4)), mlp, pe, "raw").data
    np.testing.assert_array_equal(out, np.full((3, 5), -2.5))
    scores = rng.normal(size=(3, 5))
    np.testing.assert_allclose(ad.softmax(Tensor(scores), out).data,
                               ad.softmax(Tensor(scores)).data, atol=1e-15)


@pytest.mark.parametrize("mode", ["pe", "raw", "pe_context", "raw_context"])
def test_mask_identical_keys_identical_values(mode):
    rng = np.random.default_rng(8)
    pe = PositionalEncoding(2, 8, rng)
    in_dim = {"pe": 8, "raw": 2, "pe_context": 16, "raw_context": 4}[mode]
    keys = rng.normal(size=(2, 4, 2))
    keys[:, 1] = keys[:, 0]
    out = dynamic_mask(keys, DynamicMask(in_dim, 8, rng), pe, mode).data
    np.testing.assert_array_equal(out[:, 0], out[:, 1])


def test_mask_matches_hand_rolled_mlp():
    rng = np.random.default_rng(9)
    pe = PositionalEncoding(2, 8, rng)
    mlp = DynamicMask(8, 6, rng)
    keys = rng.normal(size=(3, 4, 2))
    x = pe(keys).data
    (w1, b1), (w2, b2), (w3, b3) = [(layer.weight.data, layer.bias.data) for layer in mlp.mlp.layers]
    h = np.maximum(x @ w1 + b1, 0)
    h = np.maximum(h @ w2 + b2, 0)
    ref = (h @ w3 + b3)[..., 0]
    np.testing.assert_allclose(dynamic_mask(keys, mlp, pe, "pe").data, ref, atol=1e-12)


def test_neighborhood_mask_shape_and_gradient():
    rng = np.random.default_rng(10)
    mlp = DynamicMask(2, 6, rng, num_neighbors=4, joint=True)
    keys = rng.normal(size=(3, 4, 2))
    out = dynamic_mask(keys, mlp, None, "neighborhood")
    assert out.shape == (3, 4)
    params = mlp.parameters()
    assert ad.gradcheck(lambda: ad.tsum(ad.tanh(dynamic_mask(keys, mlp, None, "neighborhood"))),
                        params) < 1e-5


# -- party dropout -------------------------------------------------------------------


def test_dropout_none():
    assert party_dropout([0] * 5, 0.0, True, np.random.default_rng(0)) == ([0, 1, 2, 3, 4], 5)


def test_dropout_k5_rd06():
    survivors, active = party_dropout([0] * 5, 0.6, True, np.random.default_rng(0))
    assert len(survivors) == 2 and active == 2


def test_dropout_inference_keeps_all():
    assert party_dropout([0] * 5, 0.6, False, np.random.default_rng(0))[1] == 5


def test_dropout_keeps_one_survivor_below_full_rate():
    assert dropped_count(0.99, 5) == 4
    assert dropped_count(1.0, 5) == 5
    assert dropped_count(0.9, 1) == 0
    with pytest.raises(ContractError):
        dropped_count(1.5, 5)


def test_dropout_monte_carlo_frequency():
    rng = np.random.default_rng(11)
    counts = np.zeros(10)
    for _ in range(10_000):
        survivors, _ = party_dropout([0] * 10, 0.5, True, rng)
        counts[survivors] += 1
    assert np.all(np.abs(counts - 5000) <= 150)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0, 1, exclude_max=True), st.floats(-3, 3), st.integers(0, 2**31))
def test_dropout_scale_consistency(k, rate, c, seed):
    rng = np.random.default_rng(seed)
    reps = [Tensor(np.full((2, 3, 4), c)) for _ in range(k)]
    survivors, active = party_dropout(reps, rate, True, rng)
    assert active == len(survivors) >= 1
    agg = secure_aggregate([reps[h] for h in survivors], None, active)
    np.testing.assert_allclose(agg.data, c, atol=1e-12)


# -- concat aggregator ---------------------------------------------------------------


def test_concat_shapes_and_privacy_guard():
    rng = np.random.default_rng(12)
    r = Tensor(rng.normal(size=(2, 3, 4)))
    assert aggregate_concat([r]) is r
    assert aggregate_concat([r, r]).shape == (2, 3, 8)
    with pytest.raises(ContractError):
        aggregate_concat([r, r], PrivacySpec(enabled=True, noise_multiplier=1.0, num_parties=2))


# -- forward -------------------------------------------------------------------------


def test_forward_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    cfg = tiny_config(parties=1)
    model = FederatedTransformer(cfg, 3, [2], out_dim=2, seed=0)
    batch = toy_batch(rng, dims=(3, 2))
    labels = np.array([0, 1, 1])
    fn = lambda: ad.cross_entropy(model.forward(batch), labels)  # noqa: E731
    assert ad.gradcheck(fn, model.parameters()) < 1e-3


def test_forward_shape_and_determinism():
    rng = np.random.default_rng(14)
    cfg = tiny_config(parties=2)
    batch = toy_batch(rng)
    a = FederatedTransformer(cfg, 3, [2, 4], out_dim=3, seed=5).forward(batch).data
    b = FederatedTransformer(cfg, 3, [2, 4], out_dim=3, seed=5).forward(batch).data
    assert a.shape == (3, 3)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_mismatched_batch():
    rng = np.random.default_rng(15)
    model = FederatedTransformer(tiny_config(parties=2), 3, [2, 4], out_dim=2)
    with pytest.raises(DimensionError):
        model.forward(toy_batch(rng, dims=(3, 2)))
    with pytest.raises(DimensionError):
        model.forward(toy_batch(rng, dims=(3, 5, 4)))


def test_forward_permutation_symmetry():
    rng = np.random.default_rng(16)
    cfg = tiny_config(parties=2)
    model = FederatedTransformer(cfg, 3, [2, 2], out_dim=2, seed=1)
    batch = toy_batch(rng, dims=(3, 2, 2))
    out = model.forward(batch).data
    model.secondaries.reverse()
    swapped = LinkedBatch(batch.primary_rows, batch.primary_keys, batch.primary_features,
                          batch.labels, batch.neighbor_index[::-1], batch.neighbor_keys[::-1],
                          batch.neighbor_features[::-1], batch.sample_ids[::-1])
    np.testing.assert_allclose(model.forward(swapped).data, out, atol=1e-12)


def test_forward_single_party_matches_plain_transformer():
    """k=1 without privacy: the federated pipeline is a plain encoder-decoder."""
    rng = np.random.default_rng(17)
    cfg = tiny_config(parties=1)
    model = FederatedTransformer(cfg, 3, [2], out_dim=2, seed=2)
    batch = toy_batch(rng, dims=(3, 2))
    prim, sec = model.primary, model.secondaries[0]
    query = prim.encode(batch.primary_features[:, None], batch.primary_keys[:, None])
    mask = sec.mask(batch.neighbor_keys[0], cfg.mask_input)
    memory = sec.encode(batch.neighbor_features[0], batch.neighbor_keys[0], mask)
    ref = prim.decode(query, memory, mask).data
    np.testing.assert_allclose(model.forward(batch).data, ref, atol=1e-12)


def _attention_oracle(attn, q_in, m_in, mask):
    heads, hd = attn.num_heads, attn.head_dim
    q = q_in @ attn.q.weight.data + attn.q.bias.data
    k = m_in @ attn.k.weight.data + attn.k.bias.data
    v = m_in @ attn.v.weight.data + attn.v.bias.data
    out = np.zeros_like(q)
    for b in range(q.shape[0]):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(hd)
            if mask is not None:
                s = s + mask[b][None, :]
            w = np.exp(s - s.max(1, keepdims=True))
            w /= w.sum(1, keepdims=True)
            out[b, :, sl] = w @ v[b, :, sl]
    return out @ attn.out.weight.data + attn.out.bias.data


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(18)
    attn = MultiHeadAttention(8, 2, rng)
    q, m = rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 5, 8))
    mask = rng.normal(size=(2, 5))
    np.testing.assert_allclose(attn(Tensor(q), Tensor(m), mask).data,
                               _attention_oracle(attn, q, m, mask), atol=1e-12)


def test_masked_records_do_not_affect_prediction():
    rng = np.random.default_rng(19)
    cfg = tiny_config(parties=1, num_neighbors=3, mask_input="raw")
    model = FederatedTransformer(cfg, 3, [2], out_dim=2, seed=3)
    batch = toy_batch(rng, k_neighbors=3, dims=(3, 2))
    # logit = -relu(relu(key_0)): record 2 gets -1e10, the others 0
    m = model.secondaries[0].mask_mlp
    for layer in m.mlp.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    m.mlp.layers[0].weight.data[0, 0] = 1.0
    m.mlp.layers[1].weight.data[0, 0] = 1.0
    m.mlp.layers[2].weight.data[0, 0] = -1.0
    batch.neighbor_keys[0][:, :, 0] = 0.0
    batch.neighbor_keys[0][:, 2, 0] = 1e10
    base = model.forward(batch).data
    batch.neighbor_features[0][:, 2, :] = rng.normal(0, 1e3, size=(3, 2))
    assert np.max(np.abs(model.forward(batch).data - base)) < 1e-9


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(20)
    cfg = tiny_config(parties=2)
    model = FederatedTransformer(cfg, 3, [2, 4], out_dim=2, seed=4)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, {"note": "x"})
    loaded, extra = load_checkpoint(path)
    batch = toy_batch(rng)
    assert extra == {"note": "x"}
    np.testing.assert_array_equal(loaded.forward(batch).data, model.forward(batch).data)


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(hidden_size=6, num_heads=4).validate()
    with pytest.raises(ContractError):
        ModelConfig(aggregator_mode="max").validate()
    with pytest.raises(ContractError):
        ModelConfig(num_neighbors=0).validate()


def test_communication_counter_tracks_survivors():
    rng = np.random.default_rng(21)
    cfg = tiny_config(parties=5, party_dropout=0.6)
    model = FederatedTransformer(cfg, 3, [2] * 5, out_dim=2)
    batch = toy_batch(rng, dims=(3, 2, 2, 2, 2, 2))
    model.forward(batch, ctx=StepContext(training=True))
    per_rep = 3 * 2 * 4 * 8
    assert model.comm.bytes_uploaded == 2 * per_rep
    model.forward(batch, ctx=StepContext(training=False))
    assert model.comm_eval.bytes_uploaded == 5 * per_rep


def test_full_dropout_uploads_nothing_and_ignores_secondaries():
    rng = np.random.default_rng(22)
    cfg = tiny_config(parties=3, party_dropout=1.0)
    model = FederatedTransformer(cfg, 3, [2] * 3, out_dim=2)
    batch = toy_batch(rng, dims=(3, 2, 2, 2))
    out = model.forward(batch, ctx=StepContext(training=True)).data
    assert model.comm.bytes_uploaded == 0
    for feats in batch.neighbor_features:
        feats += 5.0
    np.testing.assert_array_equal(model.forward(batch, ctx=StepContext(training=True)).data, out)
