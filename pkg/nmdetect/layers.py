"""Forward and backward operators for the fixed ConvNet layer set.

Backpropagation is written out by hand for each operator. Forward functions
with a ``_cached`` suffix also return whatever their backward counterpart
needs.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from .tensor import DEFAULT_DTYPE, NonFiniteError, ShapeError, check_shape

__all__ = [
    'ConvLayerParams',
    'BatchNormParams',
    'FcLayerParams',
    'init_conv',
    'init_batchnorm',
    'init_fc',
    'conv2d_forward',
    'conv2d_backward',
    'batchnorm_forward',
    'batchnorm_backward',
    'relu',
    'relu_backward',
    'avgpool2d',
    'avgpool2d_backward',
    'fc_forward',
    'fc_backward',
    'cross_entropy_loss',
]

BN_MOMENTUM = 0.99
BN_EPS = 1e-5


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # [out_ch, in_ch, k, k]
    bias: np.ndarray     # [out_ch]
    stride: int = 1
    padding: int = 0

    trainable = ('weights', 'bias')

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(
                f"Conv weights must be [out, in, k, k], got {self.weights.shape}")
        check_shape(self.bias, (self.weights.shape[0],), "conv bias")
        if self.kernel < 1:
            raise ValueError("Kernel size must be at least 1")
        if self.stride < 1:
            raise ValueError(f"Stride must be at least 1 (got {self.stride})")
        if self.padding < 0:
            raise ValueError(f"Padding can't be negative (got {self.padding})")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    trainable = ('gamma', 'beta')

    def __post_init__(self):
        n = self.gamma.shape[0]
        for name in ('beta', 'running_mean', 'running_var'):
            check_shape(getattr(self, name), (n,), f"batchnorm {name}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"BN momentum must be in (0, 1), not {self.momentum}")
        if self.eps <= 0:
            raise ValueError("BN epsilon must be positive")
        if (self.running_var < 0).any():
            raise ValueError("BN running variance can't be negative")

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class FcLayerParams:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray     # [out]

    trainable = ('weights', 'bias')

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"FC weights must be [out, in], got {self.weights.shape}")
        check_shape(self.bias, (self.weights.shape[0],), "FC bias")

    @property
    def in_features(self):
        return self.weights.shape[1]

    @property
    def out_features(self):
        return self.weights.shape[0]


def init_conv(in_ch, out_ch, kernel, stride, rng, padding=0, dtype=DEFAULT_DTYPE):
    """Kaiming (fan-in) normal weights, zero bias"""
    fan_in = in_ch * kernel * kernel
    w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
    return ConvLayerParams(w.astype(dtype), np.zeros(out_ch, dtype=dtype),
                           stride=stride, padding=padding)


def init_batchnorm(channels, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=DEFAULT_DTYPE):
    return BatchNormParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=momentum, eps=eps,
    )


def init_fc(in_features, out_features, rng, dtype=DEFAULT_DTYPE):
    w = rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)
    return FcLayerParams(w.astype(dtype), np.zeros(out_features, dtype=dtype))


# Convolution ----------------------------------------------------------------

def _conv_windows(x, params: ConvLayerParams):
    p, k, s = params.padding, params.kernel, params.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # [B, C, H', W', k, k], a view until tensordot copies it
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def conv2d_forward_cached(x, params: ConvLayerParams):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B, C, H, W], got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, kernel expects "
            f"{params.in_channels}")
    h_out, w_out = params.output_size(x.shape[2]), params.output_size(x.shape[3])
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"Input {x.shape[2]}x{x.shape[3]} too small for kernel "
            f"{params.kernel} with padding {params.padding}")

    win = _conv_windows(x, params)
    out = np.tensordot(win, params.weights, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    out += params.bias[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, win)


def conv2d_forward(x, params: ConvLayerParams) -> np.ndarray:
    """Cross-correlate a [B, Cin, H, W] batch with the layer's kernels"""
    return conv2d_forward_cached(x, params)[0]


def conv2d_backward(dout, cache, params: ConvLayerParams):
    """Returns (dx, dweights, dbias)"""
    x_shape, win = cache
    b, c, h, w = x_shape
    k, s, p = params.kernel, params.stride, params.padding
    h_out, w_out = dout.shape[2:]

    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))

    dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += \
                np.einsum('bohw,oc->bchw', dout, params.weights[:, :, i, j])
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx, dw, db


# Batch normalization --------------------------------------------------------

def _batch_moments(x):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, as the running average uses
    return mean, var


def batchnorm_forward_cached(x, params: BatchNormParams, mode='eval',
                             update_running=True):
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(
            f"batchnorm expects [B, {params.channels}, H, W], got {x.shape}")
    if mode not in ('train', 'eval'):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")

    batch_mean, batch_var = _batch_moments(x)
    if not (np.isfinite(batch_mean).all() and np.isfinite(batch_var).all()):
        raise NonFiniteError("batchnorm statistics")

    if mode == 'train':
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ValueError("Train-mode batchnorm needs at least 2 values per channel")
        mean, var = batch_mean, batch_var
        if update_running:
            lam = params.momentum
            params.running_mean = lam * params.running_mean + (1 - lam) * batch_mean
            params.running_var = lam * params.running_var + (1 - lam) * batch_var
    else:
        mean, var = params.running_mean, params.running_var

    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return (out, batch_mean, batch_var), (xhat, inv_std, mode)


def batchnorm_forward(x, params: BatchNormParams, mode='eval', update_running=True):
    """Normalize a [B, C, H, W] batch per channel

    Returns ``(output, batch_mean, batch_var)``. In train mode the batch
    statistics normalize the input and are folded into the running averages
    (unless *update_running* is False); in eval mode the running averages
    are used and the parameters are left untouched.
    """
    return batchnorm_forward_cached(x, params, mode, update_running)[0]


def batchnorm_backward(dout, cache, params: BatchNormParams):
    """Returns (dx, dgamma, dbeta)"""
    xhat, inv_std, mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * params.gamma[None, :, None, None]
    if mode == 'eval':
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta

    n = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
    )
    return dx, dgamma, dbeta


# Elementwise, pooling, dense ------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def avgpool2d(x, k: int):
    """Mean over non-overlapping k x k windows (trailing rows/cols dropped)"""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d input must be [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"Input {h}x{w} smaller than pooling window {k}")
    return x[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))


def avgpool2d_backward(dout, x_shape, k: int):
    b, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    spread = np.repeat(np.repeat(dout, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, :ho * k, :wo * k] = spread
    return dx


def fc_forward(x, params: FcLayerParams):
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ShapeError(
            f"FC layer expects [B, {params.in_features}], got {x.shape}")
    return x @ params.weights.T + params.bias


def fc_backward(dout, x, params: FcLayerParams):
    """Returns (dx, dweights, dbias)"""
    return dout @ params.weights, dout.T @ x, dout.sum(axis=0)


def cross_entropy_loss(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits"""
    if logits.ndim != 2:
        raise ShapeError(f"Logits must be [B, K], got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    check_shape(labels, (b,), "labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"Labels must lie in [0, {k})")

    rows = np.arange(b)
    loss = -log_softmax(logits, axis=1)[rows, labels].mean()
    grad = softmax(logits, axis=1)
    grad[rows, labels] -= 1
    return float(loss), grad / b
