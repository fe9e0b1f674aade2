import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trajrefine import autodiff as ad
from trajrefine.autodiff import NonFiniteError, Tensor


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, b + 3.0),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b, (1, 0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_binary_op_gradients(name, rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    w = rng.normal(size=(3, 3) if name == "matmul" else (3, 4))
    err = ad.grad_check(lambda: (OPS[name](a, b) * Tensor(w)).sum(), [a, b])
    assert err < 1e-7


UNARY = {
    "exp": (ad.exp, None),
    "log": (lambda x: ad.log(x + 2.0), None),
    "sqrt": (lambda x: ad.sqrt(x + 2.0), None),
    "tanh": (ad.tanh, None),
    "sigmoid": (ad.sigmoid, None),
    "softplus": (ad.softplus, None),
    "abs": (ad.abs_, "kink"),
    "relu": (ad.relu, "kink"),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    fn, kind = UNARY[name]
    x = away_from_zero(rng, 2, 5) if kind == "kink" else param(rng, 2, 5)
    w = Tensor(rng.normal(size=(2, 5)))
    assert ad.grad_check(lambda: (fn(x) * w).sum(), [x]) < 1e-7


def test_shape_op_gradients(rng):
    x = param(rng, 2, 3, 4)
    y = param(rng, 2, 3, 2)
    w = rng.normal(size=(4, 3, 2))

    def f():
        z = ad.concat([x, y], axis=-1)                      # (2, 3, 6)
        z = ad.reshape(z, (3, 4, 3)).transpose(1, 0, 2)      # (4, 3, 3)
        z = ad.cumsum(z, axis=1)
        return (z[:, :, 1:] * Tensor(w)).sum() + ad.mean(x, axis=1).sum()

    assert ad.grad_check(f, [x, y]) < 1e-7


def test_take_accumulates_repeated_indices(rng):
    x = param(rng, 4)
    out = x[np.array([0, 0, 2])].sum()
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_broadcast_gradients_are_reduced(rng):
    a, b = param(rng, 3, 1, 4), param(rng, 5, 1)
    ad.backward((a * b).sum())
    assert a.grad.shape == (3, 1, 4) and b.grad.shape == (5, 1)
    np.testing.assert_allclose(a.grad, np.full((3, 1, 4), b.data.sum()), rtol=1e-12)
    np.testing.assert_allclose(b.grad, np.full((5, 1), a.data.sum()), rtol=1e-12)


def test_softmax_and_log_softmax_gradients(rng):
    x = param(rng, 3, 5, low=-3, high=3)
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    w = Tensor(rng.normal(size=(3, 5)))
    assert ad.grad_check(lambda: (ad.softmax(x, -1, mask) * w).sum(), [x]) < 1e-7
    assert ad.grad_check(lambda: (ad.log_softmax(x) * w).sum(), [x]) < 1e-7


def test_masked_softmax_zeroes_masked_entries(rng):
    x = Tensor(rng.normal(size=(2, 4)))
    mask = np.array([[True, False, True, False], [False, False, False, False]])
    out = ad.softmax(x, -1, mask).data
    np.testing.assert_array_equal(out[0, [1, 3]], 0.0)
    assert out[0].sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(out[1], 0.0)


def test_softmax_is_shift_stable():
    out = ad.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-300)


def test_layer_norm_gradients(rng):
    x, g, b = param(rng, 3, 6), param(rng, 6, low=0.5, high=1.5), param(rng, 6)
    w = Tensor(rng.normal(size=(3, 6)))
    assert ad.grad_check(lambda: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


def test_layer_norm_output_statistics(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 8)))
    out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-12)


def test_where_routes_gradient(rng):
    a, b = param(rng, 4), param(rng, 4)
    cond = np.array([True, False, True, False])
    ad.backward(ad.where(cond, a, b).sum())
    np.testing.assert_array_equal(a.grad, cond.astype(float))
    np.testing.assert_array_equal(b.grad, (~cond).astype(float))


def test_mlp_forward_gradient_and_shape_check(rng):
    layers = [(param(rng, 4, 6), param(rng, 6)), (param(rng, 6, 2), param(rng, 2))]
    x = param(rng, 5, 4)
    # keep pre-activations away from the ReLU kink
    pre = x.data @ layers[0][0].data + layers[0][1].data
    assert np.abs(pre).min() > 1e-4
    flat = [x] + [t for pair in layers for t in pair]
    assert ad.grad_check(lambda: ad.mlp_forward(x, layers).sum(), flat) < 1e-6
    with pytest.raises(ValueError, match="expects input width"):
        ad.mlp_forward(param(rng, 5, 3), layers)


def test_dropout_statistics_and_identity(rng):
    x = Tensor(np.ones((200, 500)))
    out = ad.dropout(x, 0.1, training=True, rng=np.random.default_rng(0)).data
    zeros = int((out == 0).sum())
    n = out.size
    # binomial(n, 0.1): mean 10000, sd 94.9; allow five standard deviations
    assert abs(zeros - 0.1 * n) < 5 * np.sqrt(n * 0.1 * 0.9)
    np.testing.assert_allclose(out[out != 0], 1.0 / 0.9, rtol=1e-15)
    assert ad.dropout(x, 0.1, training=False, rng=None) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)


def test_dropout_gradient_uses_same_mask(rng):
    x = param(rng, 6, 6)
    out = ad.dropout(x, 0.5, True, np.random.default_rng(3))
    ad.backward(out.sum())
    np.testing.assert_array_equal(x.grad, np.where(out.data != 0, 2.0, 0.0))


def test_non_finite_result_names_the_op():
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError, match="log"):
        ad.log(Tensor(np.array([0.0, 1.0])))
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError, match="div"):
        ad.div(Tensor(1.0), Tensor(0.0))


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(param(rng, 3) * 2.0)


def test_backward_detects_cycles():
    a = Tensor(1.0, requires_grad=True)
    b = a * 2.0
    a._parents = (b,)
    with pytest.raises(RuntimeError, match="cycle"):
        ad.backward(b)


def test_interior_gradients_are_released_and_leaves_accumulate(rng):
    x = param(rng, 3)
    h = x * 2.0
    ad.backward(h.sum())
    ad.backward((x * 3.0).sum())
    assert h.grad is None
    np.testing.assert_array_equal(x.grad, np.full(3, 5.0))


def test_grad_check_rejects_bad_step(rng):
    with pytest.raises(ValueError):
        ad.grad_check(lambda: Tensor(0.0), [], step=1e-2)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-5, 5)))
def test_sum_gradient_is_ones(data):
    x = Tensor(data, requires_grad=True)
    ad.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones_like(data))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(data):
    out = ad.softmax(Tensor(data), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out >= 0).all()


# ---------------------------------------------------------------- worked examples


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(ad.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(ad.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data, [[6.0]])
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_random_3x4_4x2():
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    w = Tensor(rng.normal(size=(3, 2)))
    assert ad.grad_check(lambda: (ad.matmul(a, b) * w).sum(), [a, b], step=1e-6) < 1e-6
    ad.backward((ad.matmul(a, b) * w).sum())
    np.testing.assert_allclose(a.grad, w.data @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ w.data, rtol=1e-12)


def test_softmax_examples():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(ad.softmax(Tensor([7.3])).data, [1.0])
    out = ad.softmax(Tensor([1000.0, 1000.0 + np.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(ad.layer_norm(Tensor([2.5, 2.5, 2.5]), one, zero).data, 0.0)
    out = ad.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # population variance 1, so only the 1e-5 epsilon separates the result from [-1, 1]
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)
    np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5), rtol=1e-15)
    with pytest.raises(ValueError):
        ad.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


def test_dropout_rate_point_one_on_a_million_entries():
    out = ad.dropout(Tensor(np.ones(10 ** 6)), 0.1, True, np.random.default_rng(5)).data
    assert abs((out == 0).mean() - 0.1) < 0.003
    x = Tensor(np.arange(4.0))
    assert ad.dropout(x, 0.0, True, None) is x


def test_mlp_examples(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    zero = [(Tensor(np.zeros((4, 5))), Tensor(np.zeros(5))), (Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))]
    np.testing.assert_array_equal(ad.mlp_forward(x, zero).data, 0.0)
    w, b = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2))
    np.testing.assert_array_equal(ad.mlp_forward(x, [(w, b)]).data, x.data @ w.data + b.data)


def test_backward_examples():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(w.sum())
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))
    x = Tensor(1.5, requires_grad=True)
    ad.backward(x + x)
    assert x.grad == 2.0


def test_grad_check_examples(rng):
    w = param(rng, 4)
    c = Tensor(rng.normal(size=4))
    assert ad.grad_check(lambda: (w * c).sum() + 3.0, [w]) < 1e-10
    logits = param(rng, 6)
    assert ad.grad_check(lambda: -ad.log_softmax(logits)[2], [logits]) < 1e-6
    # ReLU probed away from its kink: every |pre-activation| > 10 * step
    x = away_from_zero(rng, 20, margin=1e-4)
    assert np.abs(x.data).min() > 10 * 1e-6
    assert ad.grad_check(lambda: (ad.relu(x) * c.data.sum()).sum(), [x]) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradient_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 2, 3), param(rng, 2, 3)
    s = away_from_zero(rng, 2, 3)
    g, beta = param(rng, 3, low=0.5, high=1.5), param(rng, 3)
    mask = np.array([[True, False, True], [True, True, True]])
    w = Tensor(rng.normal(size=(2, 3)))
    cases = [
        lambda: ad.add(a, b), lambda: ad.sub(a, b), lambda: ad.mul(a, b), lambda: ad.div(a, b + 2.0),
        lambda: ad.exp(a), lambda: ad.log(a + 2.0), lambda: ad.sqrt(a + 2.0), lambda: ad.abs_(s),
        lambda: ad.tanh(a), lambda: ad.sigmoid(a), lambda: ad.relu(s), lambda: ad.softplus(a),
        lambda: ad.matmul(a, ad.transpose(b, (1, 0))).sum(axis=1, keepdims=True) + a,
        lambda: ad.softmax(a, -1, mask), lambda: ad.log_softmax(a), lambda: ad.layer_norm(a, g, beta),
        lambda: ad.cumsum(a, 1), lambda: ad.concat([a, b], 0)[1:3], lambda: ad.mean(a, 0) + b,
        lambda: ad.reshape(a, (3, 2)).transpose(1, 0),
        lambda: ad.where(mask, a, b),
    ]
    for fn in cases:
        err = ad.grad_check(lambda: (fn() * w).sum(), [a, b, s, g, beta])
        assert err < 1e-5
