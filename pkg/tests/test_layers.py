"""Layer primitives: forward oracles, shape contracts, adjointness, gradients."""

import numpy as np
import pytest

from cardioseg import layers, ndtensor as nd
from cardioseg.errors import ParameterError, ShapeError, StatisticsError
from cardioseg.gradcheck import check
from cardioseg.ndtensor import Tensor


def t64(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, shape, requires_grad=False):
    return Tensor(rng.normal(size=shape), dtype=np.float64, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# convolution

def test_conv_ones_same_padding_center_and_corners():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float64))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float64))
    out = layers.conv(x, w, padding=layers.same_padding(3, 2)).numpy()[0, 0]
    assert out.shape == (3, 3)
    assert out[1, 1] == 9.0
    for corner in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert out[corner] == 4.0


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(3)
    x = rand64(rng, (2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = layers.conv(x, Tensor(w), padding=(1, 1))
    np.testing.assert_array_equal(out.numpy(), x.numpy())


def test_conv_shape_contract_2d():
    x = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
    w = Tensor(np.zeros((5, 3, 3, 3), dtype=np.float32))
    assert layers.conv(x, w, padding=(1, 1)).shape == (2, 5, 8, 8)


def test_conv_shape_contract_3d():
    x = Tensor(np.zeros((1, 2, 3, 8, 8), dtype=np.float32))
    w = Tensor(np.zeros((4, 2, 3, 3, 3), dtype=np.float32))
    assert layers.conv(x, w, padding=(1, 1, 1)).shape == (1, 4, 3, 8, 8)


def test_conv_bias_added_per_channel():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    w = Tensor(np.zeros((3, 1, 1, 1), dtype=np.float64))
    b = t64([1.0, -2.0, 0.5])
    out = layers.conv(x, w, b).numpy()
    for c, expect in enumerate((1.0, -2.0, 0.5)):
        np.testing.assert_array_equal(out[0, c], np.full((2, 2), expect))


def test_conv_stride_two_extents():
    x = Tensor(np.zeros((1, 1, 8, 8), dtype=np.float64))
    w = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    assert layers.conv(x, w, stride=2).shape == (1, 1, 4, 4)


def test_conv_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float64))
    w = Tensor(np.zeros((1, 3, 3, 3), dtype=np.float64))
    with pytest.raises(ShapeError):
        layers.conv(x, w, padding=(1, 1))


def test_conv_kernel_larger_than_padded_input():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    w = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float64))
    with pytest.raises(ShapeError):
        layers.conv(x, w)


def test_conv_dtype_mismatch():
    x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float64))
    with pytest.raises(ShapeError):
        layers.conv(x, w, padding=(1, 1))


def test_same_padding_even_kernel_rejected():
    with pytest.raises(ParameterError):
        layers.same_padding(2, 2)


# ---------------------------------------------------------------------------
# transposed convolution

def test_upconv_single_pixel_scatter():
    x = Tensor(np.ones((1, 1, 1, 1), dtype=np.float64))
    w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float64))
    out = layers.upconv(x, w).numpy()
    np.testing.assert_array_equal(out, np.ones((1, 1, 2, 2)))


def test_upconv_block_scatter_oracle():
    # out[2i+u, 2j+v] = x[i,j] * w[u,v] for kernel == stride == 2
    x_np = np.array([[1.0, 2.0], [3.0, 4.0]])
    w_np = np.array([[10.0, 20.0], [30.0, 40.0]])
    x = Tensor(x_np[None, None])
    w = Tensor(w_np[None, None])
    out = layers.upconv(x, w).numpy()[0, 0]
    expect = np.zeros((4, 4))
    for i in range(2):
        for j in range(2):
            expect[2 * i:2 * i + 2, 2 * j:2 * j + 2] = x_np[i, j] * w_np
    np.testing.assert_array_equal(out, expect)


def test_upconv_shape_contract_2d():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((3, 5, 2, 2), dtype=np.float32))
    assert layers.upconv(x, w).shape == (1, 5, 8, 8)


def test_upconv_3d_preserves_z():
    x = Tensor(np.zeros((1, 2, 9, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((2, 4, 1, 2, 2), dtype=np.float32))
    assert layers.upconv(x, w, stride=(1, 2, 2)).shape == (1, 4, 9, 8, 8)


def test_upconv_stride_must_match_kernel():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    w = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    with pytest.raises(ParameterError):
        layers.upconv(x, w, stride=1)


def test_upconv_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 2, 2), dtype=np.float64))
    w = Tensor(np.zeros((3, 1, 2, 2), dtype=np.float64))
    with pytest.raises(ShapeError):
        layers.upconv(x, w)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv_upconv_adjointness_2d(seed):
    # <conv(x, w), y> == <x, upconv(y, w)> with the weight shared verbatim
    rng = np.random.default_rng(seed)
    x = rand64(rng, (2, 3, 8, 8))
    w = rand64(rng, (5, 3, 2, 2))
    y = rand64(rng, (2, 5, 4, 4))
    lhs = float((layers.conv(x, w, stride=2).numpy() * y.numpy()).sum())
    rhs = float((x.numpy() * layers.upconv(y, w, stride=2).numpy()).sum())
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_conv_upconv_adjointness_3d():
    rng = np.random.default_rng(7)
    x = rand64(rng, (1, 2, 3, 8, 8))
    w = rand64(rng, (4, 2, 1, 2, 2))
    y = rand64(rng, (1, 4, 3, 4, 4))
    lhs = float((layers.conv(x, w, stride=(1, 2, 2)).numpy() * y.numpy()).sum())
    rhs = float((x.numpy() * layers.upconv(y, w, stride=(1, 2, 2)).numpy()).sum())
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


# ---------------------------------------------------------------------------
# max pooling

def test_maxpool_two_by_two():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(layers.maxpool(x, 2).numpy(), [[[[4.0]]]])


def test_maxpool_constant_input():
    x = Tensor(np.full((1, 2, 4, 4), 3.5))
    np.testing.assert_array_equal(layers.maxpool(x, 2).numpy(), np.full((1, 2, 2, 2), 3.5))


def test_maxpool_3d_preserves_z():
    x = Tensor(np.zeros((1, 1, 9, 8, 8), dtype=np.float32))
    assert layers.maxpool(x, (1, 2, 2)).shape == (1, 1, 9, 4, 4)


def test_maxpool_indivisible_extent():
    x = Tensor(np.zeros((1, 1, 5, 4), dtype=np.float64))
    with pytest.raises(ShapeError):
        layers.maxpool(x, 2)


def test_maxpool_stride_must_equal_window():
    x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float64))
    with pytest.raises(ParameterError):
        layers.maxpool(x, 2, stride=1)


def test_maxpool_undoes_replication_upsampling():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(2, 3, 4, 4))
    repeated = base.repeat(2, axis=2).repeat(2, axis=3)
    out = layers.maxpool(Tensor(repeated), 2).numpy()
    np.testing.assert_array_equal(out, base)


def test_maxpool_tie_routes_gradient_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    with nd.Tape():
        nd.backward(nd.sum_(layers.maxpool(x, 2)))
    expect = np.zeros((1, 1, 2, 2))
    expect[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


# ---------------------------------------------------------------------------
# batch normalization

def _bn_tensors(c, dtype=np.float64):
    gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    rm = Tensor(np.zeros(c, dtype=dtype))
    rv = Tensor(np.ones(c, dtype=dtype))
    return gamma, beta, rm, rv


def test_batchnorm_constant_input_train_gives_zeros():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    gamma, beta, rm, rv = _bn_tensors(3)
    out = layers.batchnorm(x, gamma, beta, rm, rv, training=True).numpy()
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_batchnorm_beta_shifts_mean():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 2, 8, 8)))
    gamma, beta, rm, rv = _bn_tensors(2)
    beta.data[...] = 5.0
    out = layers.batchnorm(x, gamma, beta, rm, rv, training=True).numpy()
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 5.0, atol=1e-6)


def test_batchnorm_train_standardizes_per_channel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 8, 8)))
    gamma, beta, rm, rv = _bn_tensors(3)
    out = layers.batchnorm(x, gamma, beta, rm, rv, training=True).numpy()
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batchnorm_eval_identity_statistics():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    gamma, beta, rm, rv = _bn_tensors(2)
    gamma.data[...] = [2.0, 0.5]
    beta.data[...] = [1.0, -1.0]
    out = layers.batchnorm(x, gamma, beta, rm, rv, training=False).numpy()
    expect = x.numpy() * np.array([2.0, 0.5]).reshape(1, 2, 1, 1) \
        + np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(out, expect, atol=1e-4)


def test_batchnorm_running_statistics_update():
    rng = np.random.default_rng(3)
    x_np = rng.normal(1.0, 2.0, size=(4, 2, 4, 4))
    gamma, beta, rm, rv = _bn_tensors(2)
    rm.data[...] = [1.0, -1.0]
    rv.data[...] = [2.0, 3.0]
    layers.batchnorm(Tensor(x_np), gamma, beta, rm, rv, momentum=0.1, training=True)
    batch_mean = x_np.mean(axis=(0, 2, 3))
    batch_var = x_np.var(axis=(0, 2, 3))  # biased, matching normalization
    np.testing.assert_allclose(rm.numpy(), 0.9 * np.array([1.0, -1.0]) + 0.1 * batch_mean,
                               rtol=1e-6)
    np.testing.assert_allclose(rv.numpy(), 0.9 * np.array([2.0, 3.0]) + 0.1 * batch_var,
                               rtol=1e-6)


def test_batchnorm_eval_ignores_batch_statistics():
    x = Tensor(np.full((1, 1, 1, 1), 10.0))
    gamma, beta, rm, rv = _bn_tensors(1)
    out = layers.batchnorm(x, gamma, beta, rm, rv, training=False).numpy()
    np.testing.assert_allclose(out, 10.0, atol=1e-4)
    np.testing.assert_array_equal(rm.numpy(), [0.0])  # eval never touches buffers


def test_batchnorm_single_element_train_rejected():
    x = Tensor(np.zeros((1, 3, 1, 1), dtype=np.float64))
    gamma, beta, rm, rv = _bn_tensors(3)
    with pytest.raises(StatisticsError):
        layers.batchnorm(x, gamma, beta, rm, rv, training=True)


# ---------------------------------------------------------------------------
# relu / softmax / dropout

def test_relu_values():
    x = t64([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(layers.relu(x).numpy(), [0.0, 0.0, 2.0])


def test_relu_positive_identity():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(0.1, 2.0, size=(3, 3)))
    np.testing.assert_array_equal(layers.relu(x).numpy(), x.numpy())


def test_relu_gradient_mask():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with nd.Tape():
        nd.backward(nd.sum_(layers.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_softmax_uniform_logits():
    x = Tensor(np.zeros((1, 4, 2, 2), dtype=np.float64))
    np.testing.assert_allclose(layers.softmax_channels(x).numpy(), 0.25, rtol=1e-12)


def test_softmax_extreme_logits_stable():
    x = t64([[1000.0, 0.0]]).reshape((1, 2))
    out = layers.softmax_channels(x).numpy()
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)) * 3)
    total = layers.softmax_channels(x).numpy().sum(axis=1)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_softmax_needs_two_channels():
    with pytest.raises(ShapeError):
        layers.softmax_channels(Tensor(np.zeros((2, 1, 4, 4), dtype=np.float64)))


def test_dropout_rate_zero_identity():
    x = Tensor(np.ones((3, 3)))
    assert layers.dropout(x, 0.0, training=True) is x
    assert layers.dropout(x, 0.0, training=False) is x


def test_dropout_eval_identity():
    x = Tensor(np.ones((3, 3)))
    assert layers.dropout(x, 0.9, training=False) is x


def test_dropout_monte_carlo_mean():
    x = Tensor(np.ones(100_000, dtype=np.float64))
    out = layers.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).numpy()
    assert 0.98 <= out.mean() <= 1.02
    survivors = out[out != 0]
    np.testing.assert_allclose(survivors, 2.0, rtol=1e-12)


def test_dropout_bad_rate():
    x = Tensor(np.ones((2, 2)))
    for rate in (-0.1, 1.0, 1.5):
        with pytest.raises(ParameterError):
            layers.dropout(x, rate, training=True, rng=np.random.default_rng(0))


def test_dropout_train_requires_rng():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ParameterError):
        layers.dropout(x, 0.5, training=True)


# ---------------------------------------------------------------------------
# targeted finite-difference spot checks (full battery lives in gradcheck)

def _assert_all_ok(results, label):
    for r in results:
        assert r.ok, f"{label}/{r.name}: rel err {r.max_rel_error:.3e}"


def test_gradients_maxpool_composite():
    rng = np.random.default_rng(11)
    vals = (rng.permutation(32).astype(np.float64) * 0.31).reshape(1, 2, 4, 4)
    x = Tensor(vals, requires_grad=True)
    _assert_all_ok(check(lambda: nd.sum_(layers.maxpool(x, 2)), {"x": x}), "maxpool")


def test_gradients_upconv():
    rng = np.random.default_rng(12)
    x = rand64(rng, (1, 2, 3, 3), requires_grad=True)
    w = rand64(rng, (2, 3, 2, 2), requires_grad=True)
    _assert_all_ok(check(lambda: nd.sum_(layers.upconv(x, w)), {"x": x, "w": w}), "upconv")


def test_gradients_batchnorm_train():
    rng = np.random.default_rng(13)
    x = rand64(rng, (2, 2, 3, 3), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=2), dtype=np.float64, requires_grad=True)
    beta = Tensor(rng.uniform(-0.5, 0.5, size=2), dtype=np.float64, requires_grad=True)

    def f():
        rm = Tensor(np.zeros(2), dtype=np.float64)
        rv = Tensor(np.ones(2), dtype=np.float64)
        out = layers.batchnorm(x, gamma, beta, rm, rv, training=True)
        return nd.sum_(nd.mul(out, out))

    _assert_all_ok(check(f, {"x": x, "gamma": gamma, "beta": beta}), "batchnorm")
