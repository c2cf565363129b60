import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scinets import autodiff as ad
from scinets import kernels
from scinets.autodiff import Tape, Tensor, finite_diff_grad
from scinets.errors import ConfigError, DimensionError, UsageError
from scinets.graph import kernel_span

from conftest import gradcheck, leaf


def test_dilated_kernel_span_21():
    assert kernel_span(3, 10) == 21
    # a single tap at each corner of a 21x21 window reaches the centre
    x = np.zeros((1, 1, 21, 21))
    x[0, 0, 0, 0] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0
    out, _ = kernels.conv2d_forward(x, w, dilation=10)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 1.0


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
    y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("dilation,padding,stride", [(1, 1, 1), (2, 2, 1), (1, 0, 2), (3, 1, 2)])
def test_conv2d_matches_loop_oracle(rng, dilation, padding, stride):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = kernels.conv2d_forward(x, w, b, dilation, padding, stride)
    ref = kernels.conv2d_reference(x, w, b, dilation, padding, stride)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    expect = (9 + 2 * padding - dilation * 2 - 1) // stride + 1
    assert out.shape[2] == expect


def test_conv2d_small_case_from_examples(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    w = rng.normal(size=(1, 1, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(got, kernels.conv2d_reference(x, w, padding=1), atol=1e-12)


@pytest.mark.parametrize("dilation", range(1, 17))
def test_same_padding_preserves_dims(dilation):
    x = np.ones((1, 1, 40, 33))
    out, _ = kernels.conv2d_forward(x, np.ones((1, 1, 3, 3)), dilation=dilation, padding=dilation)
    assert out.shape == x.shape


def test_conv_errors():
    x = np.zeros((1, 2, 5, 5))
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x, np.zeros((1, 3, 3, 3)))
    with pytest.raises(ConfigError):
        kernels.conv2d_forward(x, np.zeros((1, 2, 3, 3)), dilation=0)
    with pytest.raises(ConfigError):
        kernels.conv2d_forward(x, np.zeros((1, 2, 3, 3)), stride=0)
    with pytest.raises(DimensionError):
        kernels.conv2d_forward(x, np.zeros((1, 2, 3, 3)), dilation=3)


def test_transpose_doubles_dims(rng):
    y = ad.conv_transpose2d(Tensor(rng.normal(size=(1, 1, 8, 8))), Tensor(rng.normal(size=(1, 1, 3, 3))),
                            Tensor(np.zeros(1)), stride=2, padding=1, output_padding=1)
    assert y.shape == (1, 1, 16, 16)


def test_transpose_zero_input_gives_bias():
    b = np.array([0.5, -2.0])
    y = ad.conv_transpose2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), Tensor(b))
    np.testing.assert_array_equal(y.data[0, 0], 0.5)
    np.testing.assert_array_equal(y.data[0, 1], -2.0)


@pytest.mark.parametrize("stride,padding,output_padding,dilation", [(2, 1, 1, 1), (1, 0, 0, 1), (2, 0, 1, 2), (3, 2, 2, 1)])
def test_transpose_matches_scatter_oracle(rng, stride, padding, output_padding, dilation):
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    got = kernels.conv_transpose2d_forward(x, w, None, stride, padding, output_padding, dilation)
    ref = kernels.conv_transpose2d_reference(x, w, None, stride, padding, output_padding, dilation)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_transpose_one_hot_reproduces_kernel(rng):
    w = rng.normal(size=(1, 1, 3, 3))
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 2] = 1.0
    got = kernels.conv_transpose2d_forward(x, w, None, stride=2, padding=1, output_padding=1)
    ref = kernels.conv_transpose2d_reference(x, w, None, stride=2, padding=1, output_padding=1)
    np.testing.assert_allclose(got, ref, atol=1e-14)
    # input pixel (1, 2) lands at (2, 4) in the doubled grid; kernel is stamped around it
    np.testing.assert_allclose(got[0, 0, 1:4, 3:6], w[0, 0], atol=1e-14)


def test_transpose_is_adjoint_of_conv(rng):
    """<conv(x), y> == <x, conv_T(y)>: the transposed conv is the input-gradient of conv."""
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = rng.normal(size=(3, 2, 3, 3))
    y = rng.normal(size=(1, 3, 3, 3))
    with Tape() as tape:
        loss = ad.tsum(ad.mul(ad.conv2d(x, Tensor(w), stride=2, padding=1), y))
    tape.backward(loss)
    # conv input 6 -> 3 with stride 2, pad 1; transpose back needs output_padding 1
    back = kernels.conv_transpose2d_forward(y, w, None, stride=2, padding=1, output_padding=1)
    np.testing.assert_allclose(back, x.grad, atol=1e-12)


def test_maxpool_basic():
    y = ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    assert y.data.tolist() == [[[[4.0]]]]


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        y = ad.maxpool2d(x, 2)
        loss = ad.tsum(y)
    np.testing.assert_array_equal(y.data, 1.0)
    tape.backward(loss)
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expect)


def test_maxpool_matches_loop(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(ad.maxpool2d(Tensor(x), 2).data, kernels.maxpool2d_reference(x, 2))


def test_maxpool_indivisible():
    with pytest.raises(ConfigError):
        ad.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_batchnorm_identity_on_standardized_input(rng):
    x = rng.normal(size=(4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(y.data, x, atol=1e-9)


def test_batchnorm_train_statistics(rng):
    x = rng.normal(3.0, 5.0, size=(3, 4, 6, 6))
    state = ad.BatchNormState(np.zeros(4), np.ones(4))
    y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, train=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    yev = ad.batchnorm2d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, train=False)
    assert not np.allclose(yev.data, y.data)


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_relu_concat_softmax():
    assert ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]
    c = ad.concat_channels([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3)))])
    assert c.shape == (1, 5, 3, 3)
    s = ad.softmax_channels(Tensor(np.full((1, 4, 2, 2), 0.7)))
    np.testing.assert_allclose(s.data, 0.25)
    with pytest.raises(DimensionError):
        ad.concat_channels([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 4, 3)))])


def test_relu_subgradient_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.relu(x))
    tape.backward(loss)
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_simple_cases(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    with Tape() as tape:
        loss = ad.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 1.0)
    with Tape() as tape:
        loss = ad.mul(ad.tsum(ad.mul(x, x)), 0.5)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_unused_leaf_gets_zero(rng):
    x, y = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    with Tape() as tape:
        loss = ad.tsum(x)
        ad.mul(y, 2.0)
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, 0.0)


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng.normal(size=3))
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_tape_order_is_topological(rng):
    x = leaf(rng.normal(size=(1, 1, 4, 4)))
    with Tape() as tape:
        h = ad.relu(ad.mul(x, 2.0))
        ad.tsum(ad.add(h, x))
    produced = set()
    for op in tape.ops:
        for t in op.inputs:
            assert t.is_leaf or id(t) in produced
        produced.add(id(op.output))


def test_no_recording_without_tape(rng):
    x = leaf(rng.normal(size=3))
    with Tape() as tape:
        pass
    ad.mul(x, 2.0)
    assert len(tape) == 0


def test_finite_diff_examples():
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda v: np.sum(v), x), [1.0, 1.0])
    np.testing.assert_allclose(finite_diff_grad(lambda v: 0.5 * np.sum(v ** 2), x), [1.0, 2.0], atol=1e-10)


def test_composite_graph_gradients(rng):
    x = leaf(rng.uniform(-2, 2, size=(1, 1, 8, 8)))
    w = leaf(rng.uniform(-2, 2, size=(2, 1, 3, 3)))
    b = leaf(rng.uniform(-2, 2, size=2))
    g, be = leaf(rng.uniform(0.5, 2, size=2)), leaf(rng.uniform(-1, 1, size=2))
    probe = rng.normal(size=(1, 2, 4, 4))

    def fn(ts):
        x, w, b, g, be = ts
        h = ad.conv2d(x, w, b, dilation=2, padding=2)
        h = ad.relu(ad.batchnorm2d(h, g, be))
        return ad.tsum(ad.mul(ad.maxpool2d(h, 2), probe))

    assert gradcheck(fn, [x, w, b, g, be]) < 1e-5


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(w), dilation=3, padding=3).data
    b = ad.conv2d(Tensor(x), Tensor(w), dilation=3, padding=3).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), dil=st.integers(1, 3), c=st.integers(1, 3))
def test_conv_shape_formula(h, w, dil, c):
    k = 3
    pad = dil
    x = np.zeros((1, c, h, w))
    out, _ = kernels.conv2d_forward(x, np.zeros((2, c, k, k)), dilation=dil, padding=pad)
    assert out.shape == (1, 2, h, w)
