import numpy as np
from numpy.testing import assert_allclose
import pytest

from nmdetect.layers import *
from nmdetect.model import build_convnet, loss_and_grads
from nmdetect.tensor import NonFiniteError, ShapeError, check_finite


def naive_conv(x, w, b, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def test_conv_identity_kernel():
    p = ConvLayerParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    out = conv2d_forward(np.ones((1, 1, 3, 3)), p)
    assert_allclose(out, np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize('stride, pad', [(1, 0), (2, 0), (1, 1), (2, 2), (3, 1)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 8, 8))
    p = ConvLayerParams(rng.standard_normal((5, 3, 4, 4)), rng.standard_normal(5),
                        stride=stride, padding=pad)
    assert_allclose(conv2d_forward(x, p), naive_conv(x, p.weights, p.bias, stride, pad),
                    atol=1e-10)


def test_conv_output_size():
    p = init_conv(3, 6, 4, 1, np.random.default_rng(0))
    assert conv2d_forward(np.zeros((1, 3, 32, 32)), p).shape == (1, 6, 29, 29)
    assert p.output_size(32) == 29


def test_conv_shape_errors():
    p = init_conv(3, 6, 4, 1, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 8, 8)), p)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 3, 3, 3)), p)
    with pytest.raises(ValueError):
        ConvLayerParams(np.zeros((1, 1, 2, 2)), np.zeros(1), stride=0)


def test_batchnorm_zero_input():
    bn = init_batchnorm(3)
    out, mean, var = batchnorm_forward(np.zeros((2, 3, 4, 4)), bn, mode='train')
    assert_allclose(out, 0)
    assert_allclose(mean, 0)


def test_batchnorm_running_update():
    bn = init_batchnorm(1)
    x = np.ones((2, 1, 2, 2))
    batchnorm_forward(x, bn, mode='train')
    assert bn.running_mean[0] == pytest.approx(0.01)
    # Biased variance of a constant batch is 0
    assert bn.running_var[0] == pytest.approx(0.99)


def test_batchnorm_running_closed_form():
    bn = init_batchnorm(2)
    bn.running_mean = np.array([0.5, -2.0])
    x = np.full((4, 2, 3, 3), 3.0)
    n = 37
    for _ in range(n):
        batchnorm_forward(x, bn, mode='train')
    lam = 0.99
    expected = lam ** n * np.array([0.5, -2.0]) + (1 - lam ** n) * 3.0
    assert_allclose(bn.running_mean, expected, rtol=1e-12)


def test_batchnorm_running_mean_converges():
    rng = np.random.default_rng(3)
    channel_means = np.array([-1.0, 0.25, 0.8])
    data = rng.standard_normal((16000, 3, 4, 4)) + channel_means[None, :, None, None]
    bn = init_batchnorm(3)
    for i in range(500):
        batchnorm_forward(data[i * 32:(i + 1) * 32], bn, mode='train')
    assert_allclose(bn.running_mean, data.mean(axis=(0, 2, 3)), atol=0.02)


def test_batchnorm_eval_is_pure():
    rng = np.random.default_rng(4)
    bn = init_batchnorm(3)
    bn.running_mean = rng.standard_normal(3)
    bn.running_var = rng.random(3) + 0.5
    before = (bn.running_mean.copy(), bn.running_var.copy())
    x = rng.standard_normal((2, 3, 4, 4))
    a = batchnorm_forward(x, bn, mode='eval')[0]
    b = batchnorm_forward(x, bn, mode='eval')[0]
    assert (a == b).all()
    assert (bn.running_mean == before[0]).all()
    assert (bn.running_var == before[1]).all()


def test_batchnorm_errors():
    bn = init_batchnorm(2)
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((1, 2, 1, 1)), bn, mode='train')
    x = np.zeros((2, 2, 2, 2))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        batchnorm_forward(x, bn, mode='train')
    with pytest.raises(ValueError):
        BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2))


def test_relu_pool_fc():
    assert_allclose(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert avgpool2d(x, 2)[0, 0, 0, 0] == 2.5
    fc = FcLayerParams(np.eye(3), np.zeros(3))
    v = np.array([[1.0, -2.0, 3.0]])
    assert_allclose(fc_forward(v, fc), v)
    with pytest.raises(ShapeError):
        fc_forward(np.zeros((1, 4)), fc)


def test_cross_entropy():
    loss, _ = cross_entropy_loss(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(np.log(10))

    logits = np.array([[100.0, 0.0, 0.0]])
    loss, _ = cross_entropy_loss(logits, np.array([0]))
    assert loss == pytest.approx(0, abs=1e-12)

    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((1, 3)), np.array([3]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 1, 4])
    _, grad = cross_entropy_loss(logits, labels)
    h = 1e-5
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (cross_entropy_loss(up, labels)[0]
                    - cross_entropy_loss(down, labels)[0]) / (2 * h)
    assert_allclose(grad, num, rtol=1e-6, atol=1e-10)


def small_model(seed):
    # 8 -> 6 -> 2 -> pool -> 1
    return build_convnet([(3, 3, 1), (3, 3, 2)], 3, seed, input_size=8)


@pytest.mark.parametrize('seed', range(25))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    for block in model.blocks:
        block.bn.gamma = rng.uniform(0.5, 1.5, block.bn.channels)
        block.bn.beta = rng.uniform(-0.5, 0.5, block.bn.channels)
    x = rng.standard_normal((4, 3, 8, 8))
    y = rng.integers(0, 3, 4)
    base = loss_and_grads(model, x, y, update_running=False)
    h = 1e-4

    def same_masks(a, b):
        return all((m1 == m2).all() for m1, m2 in zip(a.relu_masks, b.relu_masks))

    checked = 0
    for name, layer, attr in model.parameters():
        p = getattr(layer, attr)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            plus = loss_and_grads(model, x, y, update_running=False)
            p[idx] = old - h
            minus = loss_and_grads(model, x, y, update_running=False)
            p[idx] = old
            # Skip entries whose perturbation crosses a ReLU kink
            if not (same_masks(plus, base) and same_masks(minus, base)):
                continue
            num = (plus.loss - minus.loss) / (2 * h)
            assert_allclose(base.grads[name][idx], num, rtol=1e-4, atol=1e-7,
                            err_msg=f"{name}{idx}")
            checked += 1
    assert checked > 100


def test_non_finite_error_details():
    with pytest.raises(NonFiniteError) as info:
        check_finite(np.array([1.0, np.inf, np.nan]), 'logits')
    e = info.value
    assert e.args == ('logits', '2 of 3 entries')
    assert str(e) == 'Non-finite values in logits (2 of 3 entries)'
    assert NonFiniteError('loss').args == ('loss', None)
