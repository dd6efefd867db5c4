import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from mpmath import mp

from usermoe import tensor as T
from usermoe.errors import DimensionError, VocabularyError
from usermoe.tensor import Tensor

from conftest import numeric_grad, rel_err


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_projector():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    p = Tensor(np.array([[1.0, 0], [0, 0]]))
    out = p @ Tensor(np.array([[5.0, 6], [7, 8]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_grad_matches_finite_differences(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    loss = T.tsum((a @ b) * Tensor(w))
    loss.backward()
    f = lambda: float(np.sum((a.data @ b.data) * w))
    assert rel_err(a.grad, numeric_grad(f, a.data)) < 1e-6
    assert rel_err(b.grad, numeric_grad(f, b.data)) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    big = T.softmax(Tensor(np.array([1000.0, 0.0, 0.0]))).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [1, 0, 0], atol=1e-12)


def test_softmax_against_high_precision_oracle():
    x = [2.0, 1.0, -1.0]
    mp.dps = 40
    z = sum(mp.e ** v for v in x)
    oracle = [float(mp.e ** v / z) for v in x]
    got = T.softmax(Tensor(np.array(x))).data
    assert np.allclose(got, oracle, atol=1e-15)
    assert np.allclose(got, [0.7054, 0.2595, 0.0351], atol=1e-3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((2, 5), 3.7))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0.0) and np.all(np.isfinite(out.data))


def test_max_pool_of_identical_rows():
    row = np.array([0.3, -1.0, 2.5])
    x = Tensor(np.tile(row, (6, 1)))
    assert np.array_equal(T.max_pool_over_time(x).data, row)


def test_max_pool_respects_mask():
    x = Tensor(np.array([[[1.0, 5.0], [9.0, 0.0]]]))
    out = T.max_pool_over_time(x, np.array([[True, False]]))
    assert np.array_equal(out.data, [[1.0, 5.0]])


def test_embedding_lookup_accumulates_repeated_ids(rng):
    table = leaf(rng.normal(size=(6, 3)))
    ids = np.array([3, 1, 3])
    w = rng.normal(size=(3, 3))
    T.tsum(T.embedding_lookup(table, ids) * Tensor(w)).backward()
    f = lambda: float(np.sum(table.data[ids] * w))
    num = numeric_grad(f, table.data)
    assert np.allclose(table.grad, num, atol=1e-8)
    assert np.allclose(table.grad[3], w[0] + w[2])


def test_embedding_lookup_out_of_vocabulary():
    with pytest.raises(VocabularyError):
        T.embedding_lookup(leaf(np.zeros((4, 2))), np.array([4]), channel="c")


def test_backward_sum_and_dead_relu():
    x = leaf([1.0, -2.0, 3.0])
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    y = leaf([-1.0, 2.0])
    T.tsum(T.relu(y)).backward()
    assert np.array_equal(y.grad, [0.0, 1.0])


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x + x
    T.tsum(y * y).backward()
    # d/dx (x^2 + x)^2 = 2 (x^2 + x)(2x + 1)
    assert np.allclose(x.grad, 2 * 6 * 5)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_composite_ops_grad(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = rng.normal(size=(2, 3, 4))

    def build():
        h = T.layer_norm(x, g, b)
        s = T.log_softmax(T.concat([h, T.sigmoid(x)], axis=-1), axis=-1)
        return T.tsum(s[..., :4] * Tensor(w)) + T.tsum(T.max_pool_over_time(T.exp(x * 0.1)))

    build().backward()
    with T.no_grad():
        f = lambda: build().item()
        for t in (x, g, b):
            assert rel_err(t.grad, numeric_grad(f, t.data), floor=1e-6) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_add_grad_shape(m, n, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r.normal(size=(m, n))), leaf(r.normal(size=(n,)))
    T.tsum((a + b) * (a + b)).backward()
    assert b.grad.shape == (n,)
    assert np.allclose(b.grad, np.sum(2 * (a.data + b.data), axis=0))
