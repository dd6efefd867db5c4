import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usermoe import tensor as T
from usermoe.data import collate
from usermoe.dense_reference import dense_forward
from usermoe.errors import ConfigError, ContractError
from usermoe.moe import (Encoder, EncoderConfig, MoeFfn, MoeMsa, RoutingStats, balance_loss, gate,
                         gate_from_logits)
from usermoe.tensor import Tensor

from conftest import random_instances, small_schema


def test_single_expert_gate_is_one(rng):
    dec = gate(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 1))))
    assert np.all(dec.expert == 0) and np.all(dec.weight.data == 1.0)


def test_gate_value_is_router_probability():
    dec = gate_from_logits(Tensor(np.array([[2.0, 1.0, -1.0]])))
    assert dec.expert[0] == 0
    assert abs(dec.weight.data[0] - 0.7054) < 1e-4


def test_tie_breaks_to_lowest_index():
    assert gate_from_logits(Tensor(np.array([[3.0, 3.0]]))).expert[0] == 0


def test_literal_convention_gives_unit_gate():
    dec = gate_from_logits(Tensor(np.array([[2.0, 1.0, -1.0]])), "literal")
    assert dec.weight.data[0] == 1.0
    with pytest.raises(ConfigError):
        gate_from_logits(Tensor(np.zeros((1, 2))), "soft")


def test_one_expert_ffn_is_dense(rng):
    ffn = MoeFfn(4, 6, 1, rng, 0.5)
    x = Tensor(rng.normal(size=(7, 4)))
    dense = np.maximum(x.data @ ffn.w_in[0].data, 0) @ ffn.w_out[0].data
    assert np.array_equal(ffn(x).data, dense)


def test_zero_input_gives_zero(rng):
    ffn = MoeFfn(3, 5, 4, rng, 0.5)
    assert np.array_equal(ffn(Tensor(np.zeros((4, 3)))).data, np.zeros((4, 3)))


def test_hand_routed_expert():
    rng = np.random.default_rng(0)
    ffn = MoeFfn(3, 2, 2, rng)
    logit = np.log(0.6 / 0.4)
    ffn.router.data = np.zeros((3, 2))
    ffn.router.data[0] = [0.0, logit]  # x[0] = 1 gives softmax (0.4, 0.6)
    ffn.w_in[1].data = np.array([[1.0, -1.0], [2.0, 0.5], [0.0, 1.0]])
    ffn.w_out[1].data = np.array([[1.0, 0.0, 2.0], [0.5, 1.0, -1.0]])
    x = np.array([[1.0, 0.5, -2.0]])
    hidden = np.maximum(x @ ffn.w_in[1].data, 0)   # [2, 0]
    expected = 0.6 * hidden @ ffn.w_out[1].data    # 0.6 * [2, 0, 4]
    out = ffn(Tensor(x)).data
    assert ffn.last_decision.expert[0] == 1
    assert np.allclose(out, expected) and np.allclose(expected, [[1.2, 0.0, 2.4]])


def test_unselected_experts_get_zero_grad():
    rng = np.random.default_rng(3)
    ffn = MoeFfn(4, 5, 3, rng, 0.5)
    ffn.router.data[:] = 0.0
    x = Tensor(rng.normal(size=(6, 4)))
    T.tsum(ffn(x)).backward()
    # all logits tie at zero: expert 0 takes every token
    assert np.all(ffn.last_decision.expert == 0)
    for e in (1, 2):
        assert ffn.w_in[e].grad is None or not np.any(ffn.w_in[e].grad)


def _dense_attention(x, msa):
    d = x.shape[-1]
    q, k, v = (x @ w.data for w in (msa.w_q, msa.w_k, msa.w_v))
    s = q @ k.T / np.sqrt(d)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    return (a @ v) @ msa.w_o.data + msa.b_o.data


def test_single_head_single_expert_attention_matches_dense(rng):
    msa = MoeMsa(4, 1, 1, rng, 0.5)
    for n in (1, 3):
        x = rng.normal(size=(1, n, 4))
        out = msa(Tensor(x), np.ones((1, n), bool)).data[0]
        assert np.allclose(out, _dense_attention(x[0], msa), atol=1e-14)


def test_identical_positions_identical_rows(rng):
    msa = MoeMsa(6, 2, 3, rng, 0.5)
    row = rng.normal(size=6)
    x = np.stack([row, rng.normal(size=6), row])[None]
    out = msa(Tensor(x), np.ones((1, 3), bool)).data[0]
    assert np.allclose(out[0], out[2], atol=1e-14)


def test_masked_key_gets_no_attention(rng):
    msa = MoeMsa(4, 2, 2, rng, 0.5)
    x = rng.normal(size=(1, 4, 4))
    mask = np.array([[True, True, False, True]])
    base = msa(Tensor(x), mask).data
    x2 = x.copy()
    x2[0, 2] = rng.normal(size=4) * 10
    changed = msa(Tensor(x2), mask).data
    keep = [0, 1, 3]
    assert np.allclose(base[0, keep], changed[0, keep], atol=1e-13)


def test_attention_needs_a_valid_position(rng):
    msa = MoeMsa(4, 2, 2, rng)
    with pytest.raises(ContractError):
        msa(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), bool))


def test_zero_blocks_returns_projection(batch, schema):
    enc = Encoder(schema, EncoderConfig(d_model=8, blocks=0, experts=2), np.random.default_rng(0))
    assert np.array_equal(enc(batch).data, enc.mfp(batch).data)


def test_one_expert_encoder_matches_dense_reference():
    schema = small_schema()
    enc = Encoder(schema, EncoderConfig(d_model=8, d_ff=12, heads=2, blocks=2, experts=1, init_std=0.3),
                  np.random.default_rng(5))
    rng = np.random.default_rng(6)
    for _ in range(5):
        b = collate(random_instances(schema, rng), schema)
        with T.no_grad():
            assert np.array_equal(enc(b).data, dense_forward(enc, b))


def test_dense_reference_refuses_multi_expert(schema, batch):
    enc = Encoder(schema, EncoderConfig(d_model=8, experts=2), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        dense_forward(enc, batch)


def test_routing_stats_and_exclusivity(rng):
    ffn = MoeFfn(4, 4, 3, rng, 1.0)
    stats = RoutingStats()
    ffn(Tensor(rng.normal(size=(50, 4))), stats)
    assert stats.counts["ffn"].sum() == 50
    assert stats.violations == 0 and np.all(ffn.last_executions == 1)
    assert abs(sum(stats.fractions()["ffn"]) - 1) < 1e-12


def test_balance_loss_is_one_when_uniform():
    dec = gate_from_logits(Tensor(np.zeros((4, 2))))
    dec.expert[:] = [0, 1, 0, 1]
    assert abs(balance_loss(dec, 2).item() - 1.0) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_encoder_is_finite(seed, experts):
    schema = small_schema()
    r = np.random.default_rng(seed)
    enc = Encoder(schema, EncoderConfig(d_model=8, d_ff=8, heads=2, blocks=2, experts=experts,
                                        init_std=1.0), r)
    with T.no_grad():
        out = enc(collate(random_instances(schema, r), schema)).data
    assert np.all(np.isfinite(out))
