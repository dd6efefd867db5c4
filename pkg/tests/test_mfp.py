import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usermoe import tensor as T
from usermoe.data import MASK_ID, ChannelSpec, Schema, collate
from usermoe.errors import VocabularyError
from usermoe.mfp import Mfp, locate, shard_ranges, split_table
from usermoe.tensor import Tensor

from conftest import numeric_grad, random_instances, small_schema


def test_concat_of_category_and_dense():
    schema = Schema([ChannelSpec("c", "category", 4, 2), ChannelSpec("x", "dense")])
    mfp = Mfp(schema, 3, np.random.default_rng(0))
    from usermoe.data import Instance
    b = collate([Instance(0, {"c": np.array([2]), "x": np.array([0.5])})], schema)
    feats, slices = mfp.concat_features(b)
    expected = np.concatenate([mfp.tables["c"].data[2], [0.5]])
    assert feats.shape == (1, 1, 3)
    assert np.array_equal(feats.data[0, 0], expected)
    assert slices == {"c": slice(0, 2), "x": slice(2, 3)}


def test_all_mask_input_is_constant_and_finite():
    schema = Schema([ChannelSpec("c", "category", 5, 3), ChannelSpec("i", "id", 7, 2, False, 2)])
    mfp = Mfp(schema, 4, np.random.default_rng(1), init_std=0.5)
    from usermoe.data import Instance
    inst = Instance(0, {"c": np.zeros(6, dtype=np.int64), "i": np.zeros(6, dtype=np.int64)})
    out = mfp(collate([inst], schema)).data
    assert np.all(np.isfinite(out))
    assert np.all(out == out[:, :1])
    feats, _ = mfp.concat_features(collate([inst], schema))
    assert np.array_equal(feats.data[0, 0, :3], mfp.tables["c"].data[MASK_ID])


def test_shard_arithmetic():
    assert shard_ranges(10, 3) == [(0, 4), (4, 8), (8, 10)]
    assert locate(7, 10, 3) == (1, 3)
    parts = split_table(np.arange(20).reshape(10, 2), 3)
    assert [p.shape[0] for p in parts] == [4, 4, 2]


def test_single_shard_matches_plain_lookup(rng):
    table = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
    ids = rng.integers(0, 10, size=(2, 5))
    assert np.array_equal(T.sharded_lookup([table], ids, 10).data, T.embedding_lookup(table, ids).data)


def test_gradient_only_reaches_owning_shard(rng):
    full = rng.normal(size=(10, 3))
    shards = [Tensor(p.copy(), requires_grad=True) for p in split_table(full, 3)]
    w = rng.normal(size=3)
    T.tsum(T.sharded_lookup(shards, np.array([7]), 10) * Tensor(w)).backward()
    assert np.all(shards[0].grad == 0) and np.all(shards[2].grad == 0)
    f = lambda: float(T.sharded_lookup(shards, np.array([7]), 10).data[0] @ w)
    assert np.allclose(shards[1].grad, numeric_grad(f, shards[1].data), atol=1e-9)
    assert np.array_equal(shards[1].grad[3], w)


def test_sharded_lookup_rejects_out_of_range():
    shards = [Tensor(np.zeros((2, 1))) for _ in range(2)]
    with pytest.raises(VocabularyError):
        T.sharded_lookup(shards, np.array([4]), 4)


def _project(shards, seed):
    schema = small_schema(shards=shards)
    mfp = Mfp(schema, 6, np.random.default_rng(seed), init_std=0.3)
    batch = collate(random_instances(schema, np.random.default_rng(seed + 1), n=3), schema)
    out = mfp(batch)
    T.tsum(out * Tensor(np.random.default_rng(seed + 2).normal(size=out.shape))).backward()
    grad_table = np.concatenate([s.grad for s in mfp.tables["uid"]])
    return out.data, grad_table, mfp.proj_w.grad


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(0, 10_000))
def test_sharded_projection_is_bit_exact(shards, seed):
    base = _project(1, seed)
    got = _project(shards, seed)
    for a, b in zip(base, got):
        assert np.array_equal(a, b)
