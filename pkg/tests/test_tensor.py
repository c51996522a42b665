import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symlab import tensor as T
from symlab.tensor import NonFiniteError, ShapeError, Tensor, grad_check

TOL = 1e-4


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_matches_loops(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)


def test_softmax_known_values():
    y = T.softmax(Tensor([0.0, 1.0, 2.0])).data
    np.testing.assert_allclose(y, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = Tensor(rng.normal(size=(1, 7)), requires_grad=True)
    T.cross_entropy(logits, [3]).backward()
    expected = T.softmax(Tensor(logits.data)).data.copy()
    expected[0, 3] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-10)


def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda x: T.total(T.mul(x, x)), rng.normal(size=(3, 4))) < 1e-7


def test_causal_softmax_masks_future(rng):
    y = T.causal_softmax(Tensor(rng.normal(size=(2, 5, 5)))).data
    assert np.all(np.triu(y[0], k=1) == 0)
    np.testing.assert_allclose(y.sum(-1), 1.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.cross_entropy(Tensor(np.ones((2, 3))), [0])


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = T.total(T.mul(x, x))
    assert not y.requires_grad


def _weights(rng, shape):
    return rng.normal(size=shape)


# Each case maps (rng) -> (f, x) where f(x) is a scalar built from one op.
def _cases(rng):
    w34 = _weights(rng, (3, 4))
    wb = _weights(rng, (2, 3, 4))
    B = rng.normal(size=(4, 5))
    w35 = _weights(rng, (3, 5))
    g = rng.normal(size=4) + 2.0
    bias = rng.normal(size=4)
    cos_sin = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    return {
        "matmul": (lambda x: T.total(T.mul_const(T.matmul(x, Tensor(B)), w35)), rng.normal(size=(3, 4))),
        "add_sub_mul": (lambda x: T.total(T.mul(T.sub(T.add(x, x), Tensor(w34)), x)), rng.normal(size=(3, 4))),
        "scale_mul_const": (lambda x: T.total(T.mul_const(T.scale(x, 1.7), w34)), rng.normal(size=(3, 4))),
        "add_bias": (lambda x: T.total(T.mul_const(T.add_bias(Tensor(w34), x), w34)), rng.normal(size=4)),
        "reshape_transpose": (lambda x: T.total(T.mul_const(T.transpose(T.reshape(x, (4, 3)), (1, 0)), w34)),
                              rng.normal(size=(3, 4))),
        "index_concat_split": (lambda x: T.total(T.mul_const(T.concat(T.split(x, 2, axis=-1)[::-1], -1), w34)),
                               rng.normal(size=(3, 4))),
        "mean": (lambda x: T.mean(T.mul(x, x)), rng.normal(size=(3, 4))),
        "gelu": (lambda x: T.total(T.mul_const(T.gelu(x), w34)), rng.normal(size=(3, 4))),
        "relu": (lambda x: T.total(T.mul_const(T.relu(x), w34)), rng.normal(size=(3, 4)) + 0.05),
        "softmax": (lambda x: T.total(T.mul_const(T.softmax(x), w34)), rng.normal(size=(3, 4))),
        "causal_softmax": (lambda x: T.total(T.mul_const(T.causal_softmax(x), wb[:, :3, :3])), rng.normal(size=(2, 3, 3))),
        "log_softmax": (lambda x: T.total(T.mul_const(T.log_softmax(x), w34)), rng.normal(size=(3, 4))),
        "layer_norm": (lambda x: T.total(T.mul_const(T.layer_norm(x, Tensor(g), Tensor(bias)), w34)),
                       rng.normal(size=(3, 4))),
        "rms_norm": (lambda x: T.total(T.mul_const(T.rms_norm(x, Tensor(g)), w34)), rng.normal(size=(3, 4))),
        "rms_norm_gain": (lambda x: T.total(T.mul_const(T.rms_norm(Tensor(w34), x), w34)), g),
        "embedding": (lambda x: T.total(T.mul_const(T.embedding(x, ids), wb[:, :3, :])), rng.normal(size=(6, 4))),
        "rotary": (lambda x: T.total(T.mul_const(T.rotary(x, *cos_sin), w34)), rng.normal(size=(3, 4))),
        "cross_entropy": (lambda x: T.cross_entropy(x, [0, 3, 1]), rng.normal(size=(3, 4))),
    }


@pytest.mark.parametrize("name", sorted(_cases(np.random.default_rng(0))))
def test_op_gradients_over_seeds(name):
    worst = 0.0
    for seed in range(20):
        f, x = _cases(np.random.default_rng(seed))[name]
        worst = max(worst, grad_check(f, x))
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_is_a_distribution(values):
    y = T.softmax(Tensor(values)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-50, 50))
def test_log_softmax_shift_invariant(values, shift):
    a = T.log_softmax(Tensor(values)).data
    b = T.log_softmax(Tensor(np.asarray(values) + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
