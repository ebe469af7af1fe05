"""Autodiff engine: op correctness against naive references and finite differences."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from beamckm import nn, tensor as T
from helpers import conv2d_reference, gradcheck, group_norm_reference, mha_reference

rng = np.random.default_rng(1234)


def make_param(shape, scale=1.0):
    return T.TensorNode(rng.standard_normal(shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# basic graph mechanics


def test_square_grad():
    x = T.TensorNode(3.0, requires_grad=True)
    loss = x * x
    T.backward(loss)
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_disconnected_leaf_grad_is_zero():
    x = make_param((3,))
    y = make_param((3,))
    loss = T.tsum(x * x)
    T.backward(loss)
    assert np.all(y.grad_or_zero() == 0.0)


def test_backward_requires_scalar():
    x = make_param((2, 2))
    with pytest.raises(ValueError):
        T.backward(x * x)


def test_backward_accumulates_and_reset():
    x = T.TensorNode(2.0, requires_grad=True)

    def run():
        T.backward(x * x)

    run()
    g1 = float(x.grad)
    run()
    assert float(x.grad) == pytest.approx(2 * g1)
    x.reset_grad()
    run()
    assert float(x.grad) == pytest.approx(g1)


def test_backward_deterministic_after_reset():
    w = make_param((4, 4))
    x = T.TensorNode(rng.standard_normal((4, 4)))

    def grads():
        loss = T.tsum(nn.silu(T.matmul(w, x)))
        T.backward(loss)
        g = w.grad.copy()
        w.reset_grad()
        return g

    a, b = grads(), grads()
    assert np.array_equal(a, b)


def test_silu_matmul_grad_matches_fd():
    w = make_param((4, 4))
    x = T.TensorNode(rng.standard_normal((4, 4)))
    gradcheck(lambda: T.tsum(nn.silu(T.matmul(w, x))), [w], n_probes=16, rtol=1e-6)


def test_no_grad_blocks_recording():
    x = make_param((3,))
    with T.no_grad():
        y = x * x
    assert y.op_record is None and not y.requires_grad


# ---------------------------------------------------------------------------
# elementwise activations


def test_activation_values_at_origin():
    z = T.TensorNode(np.array([0.0]))
    assert nn.silu(z).values[0] == 0.0
    assert nn.sigmoid(z).values[0] == 0.5


def test_silu_matches_scalar_formula():
    xs = np.array([-2.0, -1.0, 1.0, 2.0])
    got = nn.silu(T.TensorNode(xs)).values
    want = xs * (1.0 / (1.0 + np.exp(-xs)))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_sigmoid_monotone(xs):
    out = nn.sigmoid(T.TensorNode(np.sort(np.asarray(xs)))).values
    assert np.all(np.diff(out) >= 0)


def test_gelu_matches_tanh_formula():
    xs = rng.standard_normal(32)
    got = nn.gelu(T.TensorNode(xs)).values
    c = np.sqrt(2 / np.pi)
    want = 0.5 * xs * (1 + np.tanh(c * (xs + 0.044715 * xs ** 3)))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("op", [nn.silu, nn.gelu, nn.sigmoid])
def test_activation_grads(op):
    x = make_param((64,))
    gradcheck(lambda: T.tsum(op(x)), [x], n_probes=32, rtol=1e-6)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = T.TensorNode(rng.standard_normal((1, 5, 5)))
    k = T.TensorNode(np.ones((1, 1, 1, 1)))
    b = T.TensorNode(np.zeros(1))
    out = nn.conv2d(x, k, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.values, x.values)


def test_conv2d_all_ones_sums_window():
    x = T.TensorNode(np.ones((1, 3, 3)))
    k = T.TensorNode(np.ones((1, 1, 3, 3)))
    out = nn.conv2d(x, k, None, stride=1, padding=0)
    assert out.values.shape == (1, 1, 1)
    assert out.values[0, 0, 0] == pytest.approx(9.0, abs=0)


def test_conv2d_matches_nested_loop_reference():
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = nn.conv2d(T.TensorNode(x), T.TensorNode(w), T.TensorNode(b),
                    stride=1, padding=1).values
    want = conv2d_reference(x, w, b, stride=1, padding=1)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_strided_matches_reference(stride, padding):
    x = rng.standard_normal((2, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = nn.conv2d(T.TensorNode(x), T.TensorNode(w), T.TensorNode(b),
                    stride=stride, padding=padding).values
    want = conv2d_reference(x, w, b, stride=stride, padding=padding)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    x = T.TensorNode(np.zeros((2, 4, 4)))
    k = T.TensorNode(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        nn.conv2d(x, k)


def test_conv2d_grads():
    x = make_param((2, 2, 5, 5))
    w = make_param((3, 2, 3, 3))
    b = make_param((3,))
    gradcheck(lambda: T.tsum(nn.conv2d(x, w, b, stride=2, padding=1) ** 2),
              [x, w, b], n_probes=60, rtol=1e-5)


def test_upsample_nearest_round_trip_grad():
    x = make_param((1, 2, 3, 3))
    out = nn.upsample_nearest2(x)
    assert out.shape == (1, 2, 6, 6)
    np.testing.assert_array_equal(out.values[0, 0, :2, :2], np.full((2, 2), x.values[0, 0, 0, 0]))
    gradcheck(lambda: T.tsum(nn.upsample_nearest2(x) ** 2), [x], n_probes=18)


# ---------------------------------------------------------------------------
# normalization


def test_layer_norm_constant_row_is_zero():
    x = T.TensorNode(np.array([[5.0, 5.0, 5.0, 5.0]]))
    g = T.TensorNode(np.ones(4))
    b = T.TensorNode(np.zeros(4))
    out = nn.layer_norm(x, g, b, eps=1e-5)
    np.testing.assert_allclose(out.values, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_two_element_closed_form():
    x = T.TensorNode(np.array([1.0, -1.0]))
    g = T.TensorNode(np.ones(2))
    b = T.TensorNode(np.zeros(2))
    out = nn.layer_norm(x, g, b, eps=1e-5).values
    want = 1.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [want, -want], rtol=0, atol=1e-15)


def test_layer_norm_affine_collapse():
    x = T.TensorNode(rng.standard_normal((3, 6)))
    g = T.TensorNode(np.zeros(6))
    b = T.TensorNode(np.full(6, 2.5))
    out = nn.layer_norm(x, g, b).values
    np.testing.assert_array_equal(out, np.full((3, 6), 2.5))


def test_layer_norm_standardizes_rows():
    x = T.TensorNode(rng.standard_normal((5, 32)))
    out = nn.layer_norm(x, None, None, eps=1e-10).values
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, rtol=1e-6)


def test_layer_norm_grads():
    x = make_param((4, 8))
    g = make_param((8,))
    b = make_param((8,))
    gradcheck(lambda: T.tsum(nn.layer_norm(x, g, b, eps=1e-5) ** 2),
              [x, g, b], n_probes=40)


def test_group_norm_matches_reference():
    for groups, c in [(2, 6), (4, 8), (1, 3)]:
        x = rng.standard_normal((2, c, 4, 5))
        gamma = rng.standard_normal(c)
        beta = rng.standard_normal(c)
        got = nn.group_norm(T.TensorNode(x), T.TensorNode(gamma), T.TensorNode(beta),
                            num_groups=groups).values
        want = group_norm_reference(x, gamma, beta, groups)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_group_norm_grads():
    x = make_param((2, 4, 3, 3))
    g = make_param((4,))
    b = make_param((4,))
    gradcheck(lambda: T.tsum(nn.group_norm(x, g, b, num_groups=2) ** 2),
              [x, g, b], n_probes=40)


# ---------------------------------------------------------------------------
# attention


def test_attention_single_token_is_value_path():
    d, heads = 6, 2
    x = rng.standard_normal((1, d))
    wq, wk, wv, wo = (rng.standard_normal((d, d)) for _ in range(4))
    got = nn.multihead_attention(T.TensorNode(x), T.TensorNode(wq), T.TensorNode(wk),
                                 T.TensorNode(wv), T.TensorNode(wo), heads).values
    want = (x @ wv) @ wo
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_identical_rows_symmetry():
    d, heads, length = 8, 4, 5
    row = rng.standard_normal(d)
    x = np.tile(row, (length, 1))
    wq, wk, wv, wo = (rng.standard_normal((d, d)) for _ in range(4))
    got = nn.multihead_attention(T.TensorNode(x), T.TensorNode(wq), T.TensorNode(wk),
                                 T.TensorNode(wv), T.TensorNode(wo), heads).values
    np.testing.assert_allclose(got, np.tile(got[0], (length, 1)), atol=1e-12)
    np.testing.assert_allclose(got[0], (row @ wv) @ wo, atol=1e-12)


def test_attention_matches_explicit_softmax_reference():
    length, d, heads = 3, 4, 2
    x = rng.standard_normal((length, d))
    wq, wk, wv, wo = (rng.standard_normal((d, d)) for _ in range(4))
    got = nn.multihead_attention(T.TensorNode(x), T.TensorNode(wq), T.TensorNode(wk),
                                 T.TensorNode(wv), T.TensorNode(wo), heads).values
    want = mha_reference(x, wq, wk, wv, wo, heads)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_attention_batched_matches_per_sample():
    n, length, d, heads = 3, 4, 8, 2
    x = rng.standard_normal((n, length, d))
    ws = [rng.standard_normal((d, d)) for _ in range(4)]
    nodes = [T.TensorNode(w) for w in ws]
    got = nn.multihead_attention(T.TensorNode(x), *nodes, heads).values
    for i in range(n):
        np.testing.assert_allclose(got[i], mha_reference(x[i], *ws, heads), atol=1e-12)


def test_attention_head_mismatch_raises():
    x = T.TensorNode(np.zeros((2, 6)))
    w = T.TensorNode(np.zeros((6, 6)))
    with pytest.raises(ValueError):
        nn.multihead_attention(x, w, w, w, w, heads=4)


def test_attention_grads():
    length, d, heads = 3, 4, 2
    x = make_param((length, d))
    ws = [make_param((d, d), scale=0.5) for _ in range(4)]
    gradcheck(lambda: T.tsum(nn.multihead_attention(x, *ws, heads) ** 2),
              [x, *ws], n_probes=60, rtol=1e-5)


# ---------------------------------------------------------------------------
# structural ops


def test_concat_slice_transpose_grads():
    a = make_param((2, 3))
    b = make_param((2, 2))

    def loss():
        cat = T.concat([a, b], axis=1)
        sl = T.slice_axis(cat, 1, 1, 4)
        tr = T.transpose(sl, (1, 0))
        return T.tsum(tr ** 2)

    gradcheck(loss, [a, b], n_probes=22)


def test_softmax_rows_sum_to_one():
    x = T.TensorNode(rng.standard_normal((4, 7)) * 10)
    out = nn.softmax(x).values
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)


def test_softmax_grads():
    x = make_param((3, 5))
    w = make_param((3, 5))
    gradcheck(lambda: T.tsum(nn.softmax(x) * w), [x, w], n_probes=30)


def test_gather_rows_values_and_grads():
    a = make_param((4, 3))
    idx = np.array([0, 2, 2, 1])
    out = T.gather_rows(a, idx)
    np.testing.assert_array_equal(out.values, a.values[idx])
    gradcheck(lambda: T.tsum(T.gather_rows(a, idx) ** 2), [a], n_probes=12)


def test_mean_and_broadcast_grads():
    a = make_param((3, 4))
    b = make_param((4,))
    gradcheck(lambda: T.tmean((a + b) ** 2), [a, b], n_probes=16)


def test_float32_graph_stays_float32():
    x = T.TensorNode(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
    y = nn.silu(x * 2.0 + 1.0)
    z = T.tmean(y ** 2)
    assert y.dtype == np.float32 and z.dtype == np.float32
    T.backward(z)
    assert x.grad.dtype == np.float32
