import numpy as np
import pytest

from trajrefine import autodiff as ad
from trajrefine.attention import attention_block, gated_cross_attention, init_attention
from trajrefine.autodiff import Tensor
from trajrefine.params import ParameterStore

from oracles import attention_params, gated_attention_oracle, randomize, relu_margin


def make_store(d, seed=0, random_all=True):
    store = ParameterStore(seed)
    init_attention(store, "att", d)
    if random_all:
        randomize(store, np.random.default_rng(seed + 100))
    return store


@pytest.mark.parametrize("seed", range(10))
def test_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    d, heads = [(8, 2), (16, 4), (4, 1), (12, 3)][seed % 4]
    K = int(rng.integers(1, 9))
    store = make_store(d, seed)
    f, ctx = rng.normal(size=d), rng.normal(size=(K, d))
    out = gated_cross_attention(f, ctx, store, "att", heads).data
    expected = gated_attention_oracle(f, ctx, attention_params(store, "att"), heads)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_empty_context_is_passthrough():
    store = make_store(8)
    f = np.random.default_rng(0).normal(size=8)
    np.testing.assert_array_equal(gated_cross_attention(f, np.zeros((0, 8)), store, "att", 2).data, f)


def test_single_key_gets_all_the_weight():
    store = make_store(8)
    rng = np.random.default_rng(1)
    q, ctx = Tensor(rng.normal(size=(1, 1, 8))), Tensor(rng.normal(size=(1, 1, 8)))
    _, (weights, _) = attention_block(store, "att", q, ctx, np.ones((1, 1, 1), bool), 2,
                                      return_weights=True)
    np.testing.assert_array_equal(weights.data, 1.0)


def test_weights_and_gate_ranges():
    store = make_store(16, random_all=False)
    rng = np.random.default_rng(2)
    q, ctx = Tensor(rng.normal(size=(3, 2, 16))), Tensor(rng.normal(size=(3, 5, 16)))
    mask = np.ones((3, 2, 5), bool)
    _, (weights, gate) = attention_block(store, "att", q, ctx, mask, 4, return_weights=True)
    assert ((weights.data > 0) & (weights.data < 1)).all()
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-12)
    assert ((gate.data > 0) & (gate.data < 1)).all()


def test_batched_block_matches_per_row_oracle_with_masks():
    d, heads = 8, 2
    store = make_store(d, 5)
    P = attention_params(store, "att")
    rng = np.random.default_rng(3)
    R, Q, K = 3, 2, 4
    q, ctx = rng.normal(size=(R, Q, d)), rng.normal(size=(R, K, d))
    mask = rng.random((R, Q, K)) > 0.4
    mask[0, 0] = False
    out = attention_block(store, "att", Tensor(q), Tensor(ctx), mask, heads).data
    for r in range(R):
        for i in range(Q):
            expected = gated_attention_oracle(q[r, i], ctx[r][mask[r, i]], P, heads)
            np.testing.assert_allclose(out[r, i], expected, atol=1e-12)


def test_dropout_only_in_training():
    store = make_store(8)
    rng = np.random.default_rng(4)
    f, ctx = rng.normal(size=8), rng.normal(size=(3, 8))
    a = gated_cross_attention(f, ctx, store, "att", 2).data
    b = gated_cross_attention(f, ctx, store, "att", 2, training=False, dropout=0.5).data
    np.testing.assert_array_equal(a, b)
    c = gated_cross_attention(f, ctx, store, "att", 2, training=True, dropout=0.5,
                              rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, c)


def test_gradients_through_attention():
    d = 8
    store = make_store(d, 7)
    rng = np.random.default_rng(5)
    f = Tensor(rng.normal(size=(2, 1, d)), requires_grad=True)
    ctx = Tensor(rng.normal(size=(2, 3, d)), requires_grad=True)
    mask = np.ones((2, 1, 3), bool)
    w = Tensor(rng.normal(size=(2, 1, d)))
    params = [f, ctx] + [t for _, t in store.items()]

    def loss():
        return (attention_block(store, "att", f, ctx, mask, 2) * w).sum()

    assert relu_margin(loss()) > 1e-5
    assert ad.grad_check(loss, params) < 1e-5


def test_dimension_errors():
    store = make_store(8)
    with pytest.raises(ValueError):
        gated_cross_attention(np.zeros(8), np.zeros((2, 4)), store, "att", 2)
    with pytest.raises(ValueError):
        gated_cross_attention(np.zeros(8), np.zeros((2, 8)), store, "att", 3)
