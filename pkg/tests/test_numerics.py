import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynperc.numerics import (
    ShapeError,
    Tensor,
    avg_pool,
    bce_with_logits,
    concat,
    conv2d,
    cross_entropy,
    global_avg_pool,
    grad_check,
    l1_loss,
    load_tensor,
    matmul,
    parameter,
    save_tensor,
    sigmoid,
    softmax,
    tensor_from_bytes,
    tensor_to_bytes,
    tsum,
    upsample2x_aligned,
)
from dynperc.numerics.serialize import write_tensor


def loop_conv(x, w, stride=1, pad=0):
    C, H, W = x.shape
    O, _, J, K = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - J) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for a in range(J):
                        for b in range(K):
                            acc += w[o, c, a, b] * xp[c, i * stride + a, j * stride + b]
                out[o, i, j] = acc
    return out


# -- conv2d ------------------------------------------------------------------

def test_conv_of_ones_sums_the_window():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.item() == 9.0


def test_identity_kernel_returns_input():
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    w = np.eye(3)[:, :, None, None]
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w)).data
    assert out.shape == (3, 3, 3)
    assert np.max(np.abs(out - loop_conv(x, w))) < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_stride_and_padding_match_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, loop_conv(x, w, stride, pad), atol=1e-12)


def test_conv_integer_case_frozen():
    # values produced by loop_conv on integer data
    x = np.arange(32).reshape(2, 4, 4) % 5 - 2
    w = np.arange(54).reshape(3, 2, 3, 3) % 4 - 1
    out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    expected = [[[10, -6], [-11, 25]], [[-12, 6], [25, -21]], [[10, -6], [-11, 25]]]
    np.testing.assert_array_equal(out, expected)


def test_conv_bias_is_added_per_channel():
    x = np.zeros((1, 2, 2))
    out = conv2d(Tensor(x), Tensor(np.ones((2, 1, 1, 1))), Tensor(np.array([1.5, -2.0])))
    np.testing.assert_array_equal(out.data[:, 0, 0], [1.5, -2.0])


@pytest.mark.parametrize("x_shape,w_shape,kwargs", [
    ((2, 4, 4), (1, 3, 3, 3), {}),            # channel mismatch
    ((2, 2, 2), (1, 2, 3, 3), {}),            # kernel larger than input
    ((2, 4, 4), (1, 2, 3, 3), {"pad": -1}),
    ((2, 4, 4), (1, 2, 3, 3), {"stride": 0}),
    ((4, 4), (1, 1, 3, 3), {}),               # not CHW
])
def test_conv_rejects_bad_shapes(x_shape, w_shape, kwargs):
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), **kwargs)


# -- elementwise / reductions --------------------------------------------------

def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


def test_sigmoid_of_zero_is_half():
    assert sigmoid(Tensor(0.0)).item() == 0.5


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
       st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    s = softmax(Tensor(x), axis=axis).data
    assert np.all(np.abs(s.sum(axis=axis) - 1.0) < 1e-12)
    assert np.all(s >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_sigmoid_strictly_inside_unit_interval(x):
    s = sigmoid(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))


def test_sigmoid_stays_finite_for_extreme_inputs():
    s = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(s))


def test_softmax_rejects_bad_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 3))), axis=2)


def test_global_avg_pool_matches_channel_loop():
    x = np.random.default_rng(1).standard_normal((4, 3, 5))
    out = global_avg_pool(Tensor(x)).data
    assert out.shape == (4, 1, 1)
    for c in range(4):
        total = 0.0
        for i in range(3):
            for j in range(5):
                total += x[c, i, j]
        assert abs(out[c, 0, 0] - total / 15) < 1e-14


def test_avg_pool_blocks():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(avg_pool(Tensor(x), 2).data, [[[2.5, 4.5], [10.5, 12.5]]])
    with pytest.raises(ShapeError):
        avg_pool(Tensor(np.zeros((1, 3, 4))), 2)


def test_concat_and_matmul_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3)))
    assert concat([a, b], axis=0).shape == (3, 3)
    with pytest.raises(ShapeError):
        concat([a, b], axis=1)
    with pytest.raises(ShapeError):
        concat([a, b], axis=5)
    assert matmul(a, Tensor(np.ones((3, 4)))).shape == (2, 4)
    with pytest.raises(ShapeError):
        matmul(a, a)


# -- aligned upsampling --------------------------------------------------------

def test_upsample_constant_single_pixel():
    out = upsample2x_aligned(Tensor(np.full((1, 1, 1), 3.25))).data
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 3.25))


def test_upsample_impulse_peaks_at_doubled_index():
    x = np.zeros((1, 4, 4))
    x[0, 1, 1] = 1.0
    out = upsample2x_aligned(Tensor(x)).data
    assert out.shape == (1, 8, 8)
    assert np.unravel_index(np.argmax(out[0]), (8, 8)) == (2, 2)


@pytest.mark.parametrize("h,w", [(4, 4), (5, 3), (1, 6)])
def test_stride2_sampling_inverts_upsampling(h, w):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ramp = (0.3 * rows - 0.7 * cols + 0.05 * rows * cols)[None]
    up = upsample2x_aligned(Tensor(ramp)).data
    assert up.shape == (1, 2 * h, 2 * w)
    assert np.max(np.abs(up[:, ::2, ::2] - ramp)) < 1e-6


def test_upsample_midpoints_average_neighbours():
    x = np.array([[[0.0, 2.0, 6.0]]])
    np.testing.assert_allclose(upsample2x_aligned(Tensor(x)).data[0, 0], [0, 1, 2, 4, 6, 6])


# -- autodiff plumbing ---------------------------------------------------------

def test_gradients_accumulate_until_zeroed():
    x = parameter(np.array([1.0, -2.0]))
    tsum(x * x).backward()
    tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient():
    x = parameter(np.array(3.0))
    y = x * x
    (y + y * x).backward()
    assert x.grad == pytest.approx(2 * 3 + 3 * 9)


def test_backward_requires_scalar_or_seed():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_l1_loss_subgradient_at_zero_is_zero():
    x = parameter(np.array([0.0, 1.0, -1.0]))
    l1_loss(x, np.zeros(3)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1 / 3, -1 / 3])


def test_l1_loss_weight_mask():
    x = Tensor(np.array([1.0, 5.0, -3.0]))
    assert l1_loss(x, np.zeros(3), weight=np.array([1, 0, 1])).item() == 2.0
    with pytest.raises(ShapeError):
        l1_loss(x, np.zeros(3), weight=np.zeros(3))


def test_cross_entropy_uniform_logits():
    ce = cross_entropy(Tensor(np.zeros((4, 2, 3))), np.array([[0, 1, 2], [3, -1, 0]]))
    assert ce.item() == pytest.approx(np.log(4), abs=1e-14)
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((4, 2))), np.array([-1, -1]))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((4, 2))), np.array([0, 4]))


def test_bce_matches_direct_formula():
    x = np.array([-2.0, 0.5, 3.0])
    y = np.array([0.0, 1.0, 1.0])
    direct = np.mean(-(y * np.log(1 / (1 + np.exp(-x))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-x)))))
    assert bce_with_logits(Tensor(x), y).item() == pytest.approx(direct, abs=1e-14)


# -- grad_check ----------------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(0).standard_normal(6))
    report = grad_check(lambda t: tsum(t * t), x, tol=1e-6)
    assert report.passed and report.max_rel_error < 1e-6


def test_grad_check_l1_away_from_kinks():
    x = Tensor(np.array([0.7, -1.3, 2.1]))
    assert grad_check(lambda t: l1_loss(t, np.zeros(3)), x).passed


def test_grad_check_detects_wrong_gradient():
    from dynperc.numerics.tensor import _make

    def bad_square(t):
        return tsum(_make(t.data ** 2, (t,), lambda g: (g * t.data,), "bad"))

    report = grad_check(bad_square, Tensor(np.array([1.0, 2.0])))
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)


def test_grad_check_validates_arguments():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda t: tsum(t), x, eps=1e-2)
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2, x)


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 5, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    probe = rng.standard_normal((3, 3, 2))
    report = grad_check(lambda x, w, b: tsum(conv2d(x, w, b, stride=2, pad=1) * probe), [x, w, b])
    assert report.passed, report


@pytest.mark.parametrize("seed", range(20))
def test_upsample_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    probe = rng.standard_normal((2, 6, 8))

    def f(x):
        return tsum(upsample2x_aligned(x) * probe) + tsum(global_avg_pool(x) ** 2)

    assert grad_check(f, x).passed


# -- serialization ---------------------------------------------------------------

def test_tensor_bytes_format():
    blob = tensor_to_bytes(Tensor(np.array([[1.0, 2.0]])))
    header, body = blob.split(b"\n", 1)
    assert header == b'{"shape": [1, 2], "dtype": "f64"}'
    assert body == np.array([1.0, 2.0], dtype="<f8").tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple),
              elements=st.floats(allow_nan=False)))
def test_tensor_bytes_round_trip(x):
    back = tensor_from_bytes(tensor_to_bytes(Tensor(x)))
    assert back.shape == x.shape
    np.testing.assert_array_equal(back.data, x)


def test_tensor_file_round_trip(tmp_path):
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4)))
    save_tensor(tmp_path / "x.tensor", x)
    np.testing.assert_array_equal(load_tensor(tmp_path / "x.tensor").data, x.data)
    buf = io.BytesIO()
    write_tensor(buf, x)
    assert buf.getvalue() == (tmp_path / "x.tensor").read_bytes()


@pytest.mark.parametrize("blob", [b"no header", b'{"shape": [2], "dtype": "f32"}\n' + bytes(8),
                                  b'{"shape": [2], "dtype": "f64"}\n' + bytes(8)])
def test_tensor_bytes_rejects_corrupt_blobs(blob):
    with pytest.raises(ShapeError):
        tensor_from_bytes(blob)
