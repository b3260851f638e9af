import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lrvq import tensor as T
from lrvq.tensor import Tensor

from conftest import check_grads

INSTANCES = 20


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# each entry: name -> (builder, input generator)
OPS = {
    "add_broadcast": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub_broadcast": (lambda a, b: a - b, lambda r: [r.normal(size=(2, 3, 1)), r.normal(size=(3, 4))]),
    "mul": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 1))]),
    "power_square": (lambda a: a**2, lambda r: [r.normal(size=(5,))]),
    "power_fractional": (lambda a: a**1.5, lambda r: [r.uniform(0.5, 2.0, size=(5,))]),
    "exp": (T.exp, lambda r: [r.normal(size=(3, 3))]),
    "log": (T.log, lambda r: [r.uniform(0.2, 3.0, size=(3, 3))]),
    "relu": (T.relu, lambda r: [_away_from_zero(r, (4, 3))]),
    "gelu": (T.gelu, lambda r: [r.normal(size=(4, 3))]),
    "sum_axis": (lambda a: a.sum(axis=1, keepdims=True), lambda r: [r.normal(size=(3, 4, 2))]),
    "mean_axes": (lambda a: a.mean(axis=(0, 2)), lambda r: [r.normal(size=(3, 4, 2))]),
    "reshape": (lambda a: a.reshape(6, 2), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda a: a.transpose(2, 0, 1), lambda r: [r.normal(size=(2, 3, 4))]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2]), 1:], lambda r: [r.normal(size=(3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), lambda r: [r.normal(size=(2, 1))]),
    "matmul_2d_weight": (lambda a, b: a @ b, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "matmul_batched": (lambda a, b: a @ b, lambda r: [r.normal(size=(2, 1, 3, 4)), r.normal(size=(3, 4, 2))]),
    "gather_rows": (lambda t: T.gather_rows(t, np.array([[0, 3, 3], [1, 0, 2]])), lambda r: [r.normal(size=(2, 4, 3))]),
    "softmax": (lambda a: T.softmax(a, axis=-1), lambda r: [r.normal(size=(3, 5))]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=0), lambda r: [r.normal(size=(4, 3))]),
    "layer_norm": (T.layer_norm, lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "l2_normalize": (T.l2_normalize, lambda r: [r.normal(size=(4, 3))]),
    "mse": (T.mse, lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
    "attention": (
        lambda q, k, v: T.scaled_dot_product_attention(q, k, v, np.array([0.0, 0.0, -1e9])),
        lambda r: [r.normal(size=(2, 4, 3)), r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 3))],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_central_differences(name):
    build, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(INSTANCES):
        check_grads(build, make(rng), rng)


def test_straight_through_forward_is_quantized_backward_is_identity(rng):
    z = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    zq = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    out = T.straight_through(z, zq)
    np.testing.assert_array_equal(out.data, zq.data)
    w = rng.normal(size=(3, 2))
    T.backward((out * w).sum())
    np.testing.assert_array_equal(z.grad, w)
    assert zq.grad is None


def test_stop_gradient_blocks_flow(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = T.stop_gradient(x) * x
    T.backward(y.sum())
    np.testing.assert_allclose(x.grad, x.data)


def test_shared_subexpression_accumulates(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = x * x + x
    T.backward(y.sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()


def test_non_finite_is_reported_with_op_name():
    with pytest.raises(FloatingPointError, match="log"):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_deep_chain_does_not_hit_recursion_limit():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    T.backward(y.sum())
    np.testing.assert_array_equal(x.grad, np.ones(2))


def test_float32_is_preserved_by_scalar_arithmetic():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x * 0.5 + 1.0) / 3.0
    assert y.dtype == np.float32
    T.backward(y.sum())
    assert x.grad.dtype == np.float32


def test_l2_normalize_zero_row_is_zero_with_zero_gradient():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    out = T.l2_normalize(x)
    np.testing.assert_allclose(out.data, [[0, 0], [0.6, 0.8]])
    T.backward(out.sum())
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])


def test_attention_ignores_masked_keys(rng):
    q = rng.normal(size=(1, 2, 3))
    k = rng.normal(size=(1, 3, 3))
    v = rng.normal(size=(1, 3, 3))
    bias = np.array([0.0, 0.0, -1e9])
    full = T.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), bias).data
    trimmed = T.scaled_dot_product_attention(Tensor(q), Tensor(k[:, :2]), Tensor(v[:, :2])).data
    np.testing.assert_allclose(full, trimmed, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x), axis=-1).data), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_unbroadcast_gradient_shapes(m, n, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(m, 1)), requires_grad=True)
    b = Tensor(r.normal(size=(n,)), requires_grad=True)
    T.backward((a * b).sum())
    assert a.grad.shape == (m, 1) and b.grad.shape == (n,)
    np.testing.assert_allclose(a.grad[:, 0], np.full(m, b.data.sum()))
    np.testing.assert_allclose(b.grad, np.full(n, a.data.sum()))
