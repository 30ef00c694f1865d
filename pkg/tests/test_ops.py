import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from duat import ops
from duat.tensor import ShapeError, Tensor, backward

CONV_CASES = [
    # (n, c, h, w, c_out, k, stride, padding, groups): covers every fast path
    (2, 3, 5, 4, 4, 1, 1, 0, 1),   # pointwise
    (1, 3, 8, 8, 5, 2, 2, 0, 1),   # non-overlapping patches
    (2, 4, 5, 6, 4, 3, 1, 1, 4),   # depthwise
    (1, 4, 7, 7, 4, 3, 2, 1, 4),   # depthwise, strided
    (2, 2, 6, 5, 3, 3, 1, 1, 1),   # general
    (1, 3, 9, 9, 2, 7, 4, 3, 1),   # overlapping patch embedding
    (1, 4, 6, 6, 6, 3, 1, 1, 2),   # grouped
    (1, 2, 5, 5, 3, 1, 2, 0, 1),   # strided pointwise falls back to general
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_matches_loops(case):
    n, c, h, w, co, k, s, p, g = case
    rng = np.random.default_rng(hash(case) % 2**32)
    for _ in range(10):
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((co, c // g, k, k))
        b = rng.standard_normal((1, co, 1, 1))
        got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), s, p, g).data
        np.testing.assert_allclose(got, oracles.conv2d(x, wt, b, s, p, g), rtol=0, atol=1e-10)


def test_conv2d_rejects_group_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 4, 3, 3))), Tensor(np.ones((4, 3, 3, 3))), groups=1)


def test_matmul_matches_loops():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 3, 5, 2))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b), rtol=0, atol=1e-10)


def test_resize_frozen_values():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    expected = np.array([[1.0, 1.25, 1.75, 2.0],
                         [1.5, 1.75, 2.25, 2.5],
                         [2.5, 2.75, 3.25, 3.5],
                         [3.0, 3.25, 3.75, 4.0]])
    np.testing.assert_allclose(ops.resize_bilinear(x, 4, 4).data[0, 0], expected, atol=1e-12)


@pytest.mark.parametrize("sizes", [(2, 3, 4, 6), (4, 4, 8, 8), (5, 3, 2, 7), (8, 8, 3, 3), (3, 5, 3, 5)])
def test_resize_matches_pointwise_oracle(sizes):
    h, w, oh, ow = sizes
    rng = np.random.default_rng(h * 100 + w)
    for _ in range(10):
        x = rng.standard_normal((2, 2, h, w))
        np.testing.assert_allclose(ops.resize_bilinear(Tensor(x), oh, ow).data,
                                   oracles.resize_bilinear(x, oh, ow), rtol=0, atol=1e-10)


def test_resize_preserves_constants():
    x = Tensor(np.full((1, 2, 3, 5), 7.0))
    np.testing.assert_allclose(ops.resize_bilinear(x, 12, 4).data, 7.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 5), elements=st.floats(-50, 50)), st.sampled_from([1, 2, 3]))
def test_softmax_normalizes(x, axis):
    y = ops.softmax(Tensor(x), axis=axis).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-700, 700)))
def test_sigmoid_and_reverse(x):
    s = ops.sigmoid(Tensor(x)).data
    assert ((s >= 0) & (s <= 1)).all()
    # moderate inputs stay strictly inside the open interval
    inner = np.abs(x) < 30
    assert ((s[inner] > 0) & (s[inner] < 1)).all()
    r = ops.reverse(Tensor(s)).data
    assert np.array_equal(r, 1.0 - s)


def test_bce_with_logits_matches_formula():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 1, 4, 4)) * 3
    t = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    np.testing.assert_allclose(ops.bce_with_logits(Tensor(z), Tensor(t)).data, oracles.bce(z, t), atol=1e-12)


def test_bce_with_logits_is_stable_for_large_logits():
    z = Tensor(np.array([-1000.0, 1000.0]).reshape(1, 1, 1, 2))
    t = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(ops.bce_with_logits(z, t).data, 0.0, atol=1e-12)


def test_gelu_frozen_values():
    x = Tensor(np.array([-1.0, 0.0, 1.0, 2.0]).reshape(1, 1, 1, 4))
    expected = [-0.15865525393145707, 0.0, 0.8413447460685429, 1.9544997361036416]
    np.testing.assert_allclose(ops.gelu(x).data.ravel(), expected, atol=1e-12)


def test_layer_norm_over_channels():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, 3, 3))
    one = Tensor(np.ones((1, 6, 1, 1)))
    zero = Tensor(np.zeros((1, 6, 1, 1)))
    np.testing.assert_allclose(ops.layer_norm(Tensor(x), one, zero).data, oracles.layer_norm_channels(x), atol=1e-12)


def test_batch_norm_running_stats():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3, 2, 2)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    one, zero = Tensor(np.ones((1, 3, 1, 1))), Tensor(np.zeros((1, 3, 1, 1)))
    out = ops.batch_norm(Tensor(x), one, zero, rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-12)
    # eval mode uses the buffers and leaves them untouched
    before = rm.copy()
    ev = ops.batch_norm(Tensor(x), one, zero, rm, rv, training=False)
    np.testing.assert_allclose(ev.data, (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5))
    assert np.array_equal(rm, before)


def test_split_concat_roundtrip_and_grad():
    x = Tensor(np.arange(24.0).reshape(1, 4, 2, 3), requires_grad=True)
    a, b = ops.split_channels(x, 1)
    assert a.shape == (1, 1, 2, 3) and b.shape == (1, 3, 2, 3)
    y = ops.concat_channels([b, a])
    backward(ops.reduce_sum(ops.mul(y, y)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_every_registered_op_is_differentiable():
    assert set(ops.differentiable_ops()) >= {"conv2d", "matmul", "softmax", "resize_bilinear", "sigmoid",
                                             "reverse", "layer_norm", "batch_norm", "bce_with_logits"}


def test_elementwise_dispatch():
    a, b = Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.full((1, 1, 1, 1), 2.0))
    assert ops.elementwise("sub", a, b).item() == 1.0
    assert ops.elementwise("reverse", b).item() == -1.0
    with pytest.raises(ValueError):
        ops.elementwise("pow", a, b)
    with pytest.raises(ValueError):
        ops.elementwise("add", a)
