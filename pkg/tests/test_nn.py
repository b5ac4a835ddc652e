import numpy as np
import pytest
from hypothesis import given, strategies as st

from msdb.nn import (
    BoundingBox,
    Conv2dParams,
    TransposedConv2dParams,
    bilinear_resize,
    concat_channels,
    conv2d,
    conv_output_extent,
    crop_spatial,
    paste_spatial,
    pool2d,
    relu,
    transposed_conv2d,
)
from msdb.tensor import Graph, ShapeError, Tensor, precision


def conv(x, w, b=None, stride=1, pad=0, dil=1):
    p = Conv2dParams(Tensor(w), None if b is None else Tensor(b), (stride, stride), (pad, pad), (dil, dil))
    return conv2d(Tensor(x), p).data


def tconv(x, w, stride=1, pad=0):
    return transposed_conv2d(Tensor(x), TransposedConv2dParams(Tensor(w), None, (stride, stride), (pad, pad))).data


def conv_loop(x, w, b, stride, pad, dil):
    """Direct seven-loop convolution."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi] if b is not None else 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                y = i * stride - pad + a * dil
                                xx = j * stride - pad + bb * dil
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[ni, ci, y, xx] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc
    return out


def test_one_by_one_scaling(rng):
    x = rng.normal(size=(1, 1, 4, 5))
    np.testing.assert_allclose(conv(x, np.full((1, 1, 1, 1), 2.0)), 2 * x, rtol=1e-6)


def test_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_allclose(conv(x, w, pad=1), x, rtol=1e-6)


def test_all_ones_kernel_by_hand():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_allclose(conv(x, np.ones((1, 1, 3, 3)), pad=1), [[[[10, 10], [10, 10]]]])


@pytest.mark.parametrize("stride,pad,dil,k", [(1, 0, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (2, 0, 2, 2), (3, 1, 1, 1)])
def test_conv_matches_loop_oracle(rng, stride, pad, dil, k):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    with precision(np.float64):
        got = conv(x, w, b, stride, pad, dil)
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, dil), atol=1e-10)


def test_conv_rejects_empty_output():
    with pytest.raises(ShapeError):
        conv(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)))
    assert conv_output_extent(5, 3, 2, 1, 1) == 3


def test_transposed_kernel_stamp():
    out = tconv(np.ones((1, 1, 1, 1)), np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_allclose(out[0, 0], [[1, 2], [3, 4]])


def test_transposed_stamp_and_sum():
    x = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = tconv(x, np.ones((1, 1, 2, 2)), stride=2)[0, 0]
    expect = np.zeros((4, 4))
    expect[:2, :2] = 1
    expect[2:, 2:] = 1
    np.testing.assert_allclose(out, expect)


def adjoint_gap(rng, k, stride, pad, m):
    # input extent chosen so the transposed conv returns exactly the input shape
    h = stride * m + k - 2 * pad
    x = rng.normal(size=(2, 3, h, h + stride))
    w = rng.normal(size=(4, 3, k, k))
    with precision(np.float64):
        fx = conv(x, w, stride=stride, pad=pad)
        y = rng.normal(size=fx.shape)
        back = tconv(y, w, stride=stride, pad=pad)
    assert back.shape == x.shape
    lhs, rhs = np.vdot(fx, y), np.vdot(x, back)
    return abs(lhs - rhs) / max(1.0, abs(lhs))


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 1), st.integers(1, 4),
       st.integers(0, 10_000))
def test_adjoint_identity(k, stride, pad, m, seed):
    if 2 * pad >= k + stride * m:
        return
    assert adjoint_gap(np.random.default_rng(seed), k, stride, pad, m) < 1e-10


def test_bilinear_constant_stays_constant():
    out = bilinear_resize(Tensor(np.full((1, 2, 3, 4), 7.0)), 9, 2).data
    np.testing.assert_allclose(out, 7.0)


def test_bilinear_by_hand():
    x = np.array([[[[0.0, 2.0], [4.0, 6.0]]]])
    out = bilinear_resize(Tensor(x), 3, 3).data[0, 0]
    np.testing.assert_allclose(out, [[0, 1, 2], [2, 3, 4], [4, 5, 6]])


def test_bilinear_same_size_is_bit_identical(rng):
    x = rng.normal(size=(1, 2, 5, 3)).astype(np.float32)
    out = bilinear_resize(Tensor(x), 5, 3).data
    assert out.tobytes() == x.tobytes()


def test_bilinear_matches_scalar_oracle(rng):
    x = rng.normal(size=(3, 4))

    def sample(y, xx):
        y0, x0 = int(np.floor(y)), int(np.floor(xx))
        y1, x1 = min(y0 + 1, 2), min(x0 + 1, 3)
        fy, fx = y - y0, xx - x0
        return ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])

    expect = np.array([[sample(i * 2 / 6, j * 3 / 4) for j in range(5)] for i in range(7)])
    with precision(np.float64):
        got = bilinear_resize(Tensor(x[None, None]), 7, 5).data[0, 0]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_pool_global_mean(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    np.testing.assert_allclose(pool2d(Tensor(x), "avg", (1, 1)).data[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-6)


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_pool_identity_grid(rng, mode):
    x = rng.normal(size=(1, 2, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(pool2d(Tensor(x), mode, (4, 3)).data, x)


def test_pool_by_hand():
    x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
    np.testing.assert_allclose(pool2d(Tensor(x), "avg", (2, 2)).data[0, 0], [[3.5, 5.5], [11.5, 13.5]])
    np.testing.assert_allclose(pool2d(Tensor(x), "max", (2, 2)).data[0, 0], [[6, 8], [14, 16]])


def test_pool_rejects_oversized_grid():
    with pytest.raises(ShapeError):
        pool2d(Tensor(np.ones((1, 1, 2, 2))), "avg", (3, 1))


def test_crop_full_box_is_identity(rng):
    x = rng.normal(size=(1, 2, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(crop_spatial(Tensor(x), BoundingBox.full(4, 5)).data, x)


def test_crop_outside_frame_rejected():
    with pytest.raises(ShapeError):
        crop_spatial(Tensor(np.ones((1, 1, 4, 4))), BoundingBox(2, 2, 3, 3))


def test_paste_then_crop_round_trip(rng):
    box = BoundingBox(1, 2, 3, 2)
    x = rng.normal(size=(1, 3, 3, 2)).astype(np.float32)
    full = paste_spatial(Tensor(x), box, (6, 6), fill=[9.0, 0.0, 0.0])
    np.testing.assert_allclose(crop_spatial(full, box).data, x, atol=1e-5)
    assert full.data[0, 0, 0, 0] == 9.0 and full.data[0, 1, 5, 5] == 0.0


def test_concat_channels_order(rng):
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))
    out = concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (1, 5, 3, 3)
    np.testing.assert_allclose(out[:, :2], a, rtol=1e-6)
    np.testing.assert_allclose(out[:, 2:], b, rtol=1e-6)


def test_relu_values_and_gradient():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        y = relu(x)
        g.backward(y.sum())
    np.testing.assert_allclose(y.data, [0.0, 2.0])
    np.testing.assert_allclose(x.grad, [0.0, 1.0])
