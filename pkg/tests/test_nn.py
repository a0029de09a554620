import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aescnn import nn
from aescnn.errors import DegenerateStatisticsError, NumericError, ShapeError
from helpers import GRAD_RTOL, SEEDS, central_diff, rel_error

DTYPES = (np.float32, np.float64)


def conv_params(cin, cout, k, seed, dtype):
    rng = np.random.default_rng(seed)
    p = nn.ConvParams.init(cin, cout, k, rng, dtype)
    p.bias.value = rng.normal(size=cout).astype(dtype)
    return p


def bn_params(ch, seed, dtype):
    rng = np.random.default_rng(seed + 100)
    bn = nn.BatchNormParams.init(ch, dtype)
    bn.scale.value = rng.uniform(0.5, 1.5, ch).astype(dtype)
    bn.shift.value = rng.normal(size=ch).astype(dtype)
    return bn.with_running_stats(rng.normal(size=ch).astype(dtype),
                                 rng.uniform(0.5, 2.0, ch).astype(dtype))


def as64(t: nn.Tensor) -> np.ndarray:
    return t.value.astype(np.float64)


# --------------------------------------------------------------------------
# convolution


def test_conv_shapes_from_tables():
    rng = np.random.default_rng(0)
    x = np.zeros((1, 3, 227, 227), np.float32)
    assert nn.conv2d_forward(x, nn.ConvParams.init(3, 128, 1, rng)).shape == (1, 128, 227, 227)
    x = np.zeros((1, 96, 7, 7), np.float32)
    assert nn.conv2d_forward(x, nn.ConvParams.init(96, 96, 3, rng)).shape == (1, 96, 7, 7)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 4, 5, 6)).astype(np.float32)
    w = np.eye(4, dtype=np.float32)[:, :, None, None]
    p = nn.ConvParams(nn.Tensor(w), nn.Tensor(np.zeros(4, np.float32)))
    np.testing.assert_array_equal(nn.conv2d_forward(x, p), x)


def test_conv3x3_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 4))
    p = conv_params(2, 3, 3, 2, np.float64)
    w, b = as64(p.weight), as64(p.bias)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 4))
    for n in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(nn.conv2d_forward(x, p), ref, rtol=1e-12, atol=1e-12)


def test_conv_zero_upstream_gives_zero_grads():
    x = np.random.default_rng(3).normal(size=(1, 2, 5, 5))
    p = conv_params(2, 3, 3, 3, np.float64)
    dx, dw, db = nn.conv2d_backward(x, p, np.zeros((1, 3, 5, 5)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_bias_grad_is_channel_sum():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 5, 5))
    dy = rng.normal(size=(2, 3, 5, 5))
    _, _, db = nn.conv2d_backward(x, conv_params(2, 3, 3, 4, np.float64), dy)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)), rtol=1e-14)


def test_conv_weight_grad_step_1e3():
    # coarse central differences with h = 1e-3 on a 1x2x5x5 input
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 5, 5))
    p = conv_params(2, 3, 3, 5, np.float64)
    r = rng.normal(size=(1, 3, 5, 5))
    _, dw, _ = nn.conv2d_backward(x, p, r)
    w = p.weight.value
    numeric = central_diff(lambda: float(np.sum(nn.conv2d_forward(x, p) * r)), w, h=1e-3)
    assert rel_error(dw, numeric) < 1e-3


def test_conv_rejects_bad_input():
    p = conv_params(2, 3, 3, 0, np.float32)
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((1, 4, 5, 5), np.float32), p)
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((1, 2, 2, 2), np.float32), p)
    bad = np.zeros((1, 2, 5, 5), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        nn.conv2d_forward(bad, p)
    with pytest.raises(ShapeError):
        nn.conv2d_backward(np.zeros((1, 2, 5, 5)), p, np.zeros((1, 3, 4, 4)))


# --------------------------------------------------------------------------
# gradient checks, every operator, 5 seeds x 2 precisions


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("k", (1, 3))
def test_conv_gradcheck(k, dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x64 = rng.normal(size=(2, 3, 5, 5))
        r = rng.normal(size=(2, 4, 5, 5))
        p = conv_params(3, 4, k, seed, dtype)
        dx, dw, db = nn.conv2d_backward(x64.astype(dtype), p, r.astype(dtype))
        p64 = nn.ConvParams(nn.Tensor(as64(p.weight)), nn.Tensor(as64(p.bias)))
        f = lambda: float(np.sum(nn.conv2d_forward(x64, p64) * r))
        for analytic, target in ((dx, x64), (dw, p64.weight.value), (db, p64.bias.value)):
            assert rel_error(analytic, central_diff(f, target)) < GRAD_RTOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("mode", ("train", "infer"))
def test_batchnorm_gradcheck(mode, dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x64 = rng.normal(1.0, 2.0, size=(3, 2, 3, 3))
        r = rng.normal(size=x64.shape)
        bn = bn_params(2, seed, dtype)
        _, cache, _ = nn.batchnorm_forward(x64.astype(dtype), bn, mode)
        dx, dscale, dshift = nn.batchnorm_backward(cache, r.astype(dtype))
        bn64 = nn.BatchNormParams(nn.Tensor(as64(bn.scale)), nn.Tensor(as64(bn.shift)),
                                  bn.running_mean.astype(np.float64),
                                  bn.running_var.astype(np.float64))
        f = lambda: float(np.sum(nn.batchnorm_forward(x64, bn64, mode)[0] * r))
        for analytic, target in ((dx, x64), (dscale, bn64.scale.value), (dshift, bn64.shift.value)):
            assert rel_error(analytic, central_diff(f, target)) < GRAD_RTOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_gate_gradcheck(dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        b64 = rng.normal(0, 3, size=(2, 3, 4, 4))
        r = rng.normal(size=b64.shape)
        analytic = nn.gate_backward(b64.astype(dtype), r.astype(dtype))
        numeric = central_diff(lambda: float(np.sum(nn.gate_forward(b64) * r)), b64)
        assert rel_error(analytic, numeric) < GRAD_RTOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_gated_block_gradcheck(dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x64 = rng.normal(size=(2, 3, 4, 4))
        r = rng.normal(size=(2, 2, 4, 4))
        conv, bn = conv_params(3, 2, 3, seed, dtype), bn_params(2, seed, dtype)
        _, _, cache, _ = nn.gated_block_forward(x64.astype(dtype), conv, bn, "train")
        dx, grads = nn.gated_block_backward(cache, r.astype(dtype))
        conv64 = nn.ConvParams(nn.Tensor(as64(conv.weight)), nn.Tensor(as64(conv.bias)))
        bn64 = nn.BatchNormParams(nn.Tensor(as64(bn.scale)), nn.Tensor(as64(bn.shift)),
                                  bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64))
        f = lambda: float(np.sum(nn.gated_block_forward(x64, conv64, bn64, "train")[0] * r))
        targets = {"weight": conv64.weight.value, "scale": bn64.scale.value, "shift": bn64.shift.value}
        assert rel_error(dx, central_diff(f, x64)) < GRAD_RTOL[dtype]
        for key, target in targets.items():
            assert rel_error(grads[key], central_diff(f, target)) < GRAD_RTOL[dtype]
        # conv bias ahead of train-mode batchnorm is cancelled by the mean subtraction
        numeric_bias = central_diff(f, conv64.bias.value)
        assert np.abs(grads["bias"]).max() < 1e-4 and np.abs(numeric_bias).max() < 1e-6


@pytest.mark.parametrize("dtype", DTYPES)
def test_maxpool_gradcheck(dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x64 = rng.permutation(2 * 2 * 9 * 9).reshape(2, 2, 9, 9) * 0.01
        r = rng.normal(size=(2, 2, 3, 3))
        _, cache = nn.maxpool_forward(x64.astype(dtype), 3, 3)
        analytic = nn.maxpool_backward(cache, r.astype(dtype))
        numeric = central_diff(lambda: float(np.sum(nn.maxpool_forward(x64, 3, 3)[0] * r)), x64)
        assert rel_error(analytic, numeric) < GRAD_RTOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_fc_gradcheck(dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x64 = rng.normal(size=(3, 7))
        r = rng.normal(size=(3, 5))
        p = nn.DenseParams.init(7, 5, rng, dtype)
        p.bias.value = rng.normal(size=5).astype(dtype)
        dx, dw, db = nn.fc_backward(x64.astype(dtype), p, r.astype(dtype))
        p64 = nn.DenseParams(nn.Tensor(as64(p.weight)), nn.Tensor(as64(p.bias)))
        f = lambda: float(np.sum(nn.fc_forward(x64, p64) * r))
        for analytic, target in ((dx, x64), (dw, p64.weight.value), (db, p64.bias.value)):
            assert rel_error(analytic, central_diff(f, target)) < GRAD_RTOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_cross_entropy_gradcheck(dtype):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        z64 = rng.normal(0, 2, size=(4, 8))
        labels = rng.integers(0, 8, 4)
        _, _, analytic = nn.softmax_cross_entropy(z64.astype(dtype), labels)
        numeric = central_diff(lambda: nn.softmax_cross_entropy(z64, labels)[0], z64)
        assert rel_error(analytic, numeric) < GRAD_RTOL[dtype]


# --------------------------------------------------------------------------
# batchnorm


def test_batchnorm_train_standardizes():
    x = np.random.default_rng(6).normal(3.0, 5.0, size=(4, 3, 6, 6)).astype(np.float32)
    out, _, _ = nn.batchnorm_forward(x, nn.BatchNormParams.init(3), "train")
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_batchnorm_constant_channel_is_zero():
    x = np.full((2, 1, 3, 3), 4.2, np.float32)
    out, _, _ = nn.batchnorm_forward(x, nn.BatchNormParams.init(1), "train")
    assert np.abs(out).max() < 1e-5


def test_batchnorm_infer_closed_form():
    x = np.random.default_rng(7).normal(size=(2, 2, 3, 3))
    bn = nn.BatchNormParams.init(2, np.float64)
    bn.scale.value[:] = 2.0
    bn.shift.value[:] = 1.0
    out, _, state = nn.batchnorm_forward(x, bn, "infer")
    np.testing.assert_allclose(out, (2 * x + 1 - 1) / math.sqrt(1 + 1e-5) + 1, rtol=1e-12)
    np.testing.assert_allclose(out, 2 * x + 1, atol=1e-4)
    assert state is bn


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(8).normal(2.0, 3.0, size=(4, 2, 5, 5))
    bn = nn.BatchNormParams.init(2, np.float64)
    _, _, state = nn.batchnorm_forward(x, bn, "train")
    mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(state.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    # the input params are untouched
    assert not bn.running_mean.any() and (bn.running_var == 1).all()


def test_batchnorm_single_element_train_is_degenerate():
    with pytest.raises(DegenerateStatisticsError):
        nn.batchnorm_forward(np.ones((1, 2, 1, 1), np.float32), nn.BatchNormParams.init(2), "train")


# --------------------------------------------------------------------------
# gate, pool, fc, loss, sgd


def test_gate_examples():
    assert not nn.gate_forward(np.zeros(5)).any()
    np.testing.assert_allclose(nn.gate_forward(np.array([40.0])), [40.0], rtol=1e-12)
    b = np.random.default_rng(9).normal(0, 4, size=200)
    oracle = np.array([v * (1 / (1 + math.exp(-v))) for v in b])
    np.testing.assert_allclose(nn.gate_forward(b), oracle, atol=1e-6)


def test_gated_block_is_gate_of_batchnorm():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    conv, bn = conv_params(3, 4, 3, 10, np.float32), bn_params(4, 10, np.float32)
    out, pre, _, _ = nn.gated_block_forward(x, conv, bn, "train")
    ref, _, _ = nn.batchnorm_forward(nn.conv2d_forward(x, conv), bn, "train")
    np.testing.assert_array_equal(pre, ref)
    b = pre.astype(np.float64)
    np.testing.assert_allclose(out, b / (1 + np.exp(-b)), atol=1e-6)


@pytest.mark.parametrize("extent,k,expected", [(227, 8, 28), (192, 8, 24), (28, 4, 7), (24, 4, 6)])
def test_maxpool_extents(extent, k, expected):
    out, _ = nn.maxpool_forward(np.zeros((1, 1, extent, extent), np.float32), k, k)
    assert out.shape == (1, 1, expected, expected)
    assert nn.pool_output_extent(extent, k, k) == math.floor((extent - k) / k) + 1 == expected


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 1, 2, 2))
    _, cache = nn.maxpool_forward(x, 2, 2)
    dx = nn.maxpool_backward(cache, np.array([[[[5.0]]]]))
    np.testing.assert_array_equal(dx[0, 0], [[5.0, 0.0], [0.0, 0.0]])


def test_maxpool_rejects_bad_kernels():
    with pytest.raises(ShapeError):
        nn.maxpool_forward(np.zeros((1, 1, 4, 4)), 8, 8)
    with pytest.raises(ShapeError):
        nn.maxpool_forward(np.zeros((1, 1, 8, 8)), 3, 2)


def test_fc_shapes_and_identity():
    rng = np.random.default_rng(11)
    fc1 = nn.DenseParams.init(4704, 36, rng)
    fc2 = nn.DenseParams.init(36, 8, rng)
    h = nn.fc_forward(np.ones((1, 4704), np.float32), fc1)
    assert h.shape == (1, 36) and nn.fc_forward(h, fc2).shape == (1, 8)
    eye = nn.DenseParams(nn.Tensor(np.eye(6)), nn.Tensor(np.zeros(6)))
    x = rng.normal(size=(3, 6))
    np.testing.assert_array_equal(nn.fc_forward(x, eye), x)
    with pytest.raises(ShapeError):
        nn.fc_forward(np.ones((1, 5)), eye)


def test_softmax_cross_entropy_examples():
    loss, probs, grad = nn.softmax_cross_entropy(np.zeros((1, 8)), [3])
    np.testing.assert_allclose(probs, 1 / 8, rtol=1e-15)
    assert loss == pytest.approx(math.log(8), abs=1e-12)
    assert round(loss, 5) == 2.07944
    expected = np.full(8, 1 / 8)
    expected[3] -= 1
    np.testing.assert_allclose(grad[0], expected, atol=1e-15)
    z = np.random.default_rng(12).normal(size=(5, 8))
    _, _, g = nn.softmax_cross_entropy(z, [0, 1, 2, 3, 7])
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(z, [0, 1, 2, 3, 8])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-700, 700)))
def test_softmax_is_a_distribution(z):
    p = nn.softmax(z)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_batchnorm_train_pre_affine_moments(x):
    var = x.var(axis=(0, 2, 3))
    out, _, _ = nn.batchnorm_forward(x, nn.BatchNormParams.init(3, np.float64), "train")
    ok = var > 1e-3
    assert np.abs(out.mean(axis=(0, 2, 3))[ok]).max(initial=0) < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3))[ok] - 1).max(initial=0) < 1e-4


def test_sgd_examples():
    p = {"w": nn.Tensor(np.array([1.0, -2.0]))}
    p["w"].grad = np.zeros(2)
    nn.sgd_step(p, nn.SgdState())
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])

    p["w"].grad = np.array([0.5, 1.0])
    nn.sgd_step(p, nn.SgdState(learning_rate=0.2, momentum_coef=0.0))
    np.testing.assert_allclose(p["w"].value, [0.9, -2.2], rtol=1e-15)

    g = np.array([1.0, -3.0])
    q = {"w": nn.Tensor(np.zeros(2), grad=g)}
    state = nn.SgdState(learning_rate=0.1, momentum_coef=0.9)
    nn.sgd_step(q, state)
    nn.sgd_step(q, state)
    np.testing.assert_allclose(q["w"].value, -0.29 * g, rtol=1e-14)


def test_sgd_rejects_mismatched_grad():
    p = {"w": nn.Tensor(np.zeros(2))}
    p["w"].grad = np.zeros(3)
    with pytest.raises((ShapeError, ValueError)):
        nn.sgd_step(p, nn.SgdState())


def test_tensor_invariants():
    t = nn.Tensor(np.zeros((1, 2, 3, 4), np.float32))
    assert t.size == 24 and t.is_finite()
    with pytest.raises((ShapeError, ValueError)):
        nn.Tensor(np.zeros(3), grad=np.zeros(4))
    t.value[0, 0, 0, 0] = np.inf
    assert not t.is_finite()
