"""The ConvNet classifier and its activation-statistics taps.

Every convolution output (the input to the following batch-norm layer) is a
tap point: its per-channel spatial mean is what batch norm's running mean
tracks, so statistics measured there can be compared against it directly.
"""
from dataclasses import dataclass, field, replace
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .layers import (
    BatchNormParams, ConvLayerParams, FcLayerParams,
    avgpool2d, avgpool2d_backward, batchnorm_backward, batchnorm_forward,
    batchnorm_forward_cached, conv2d_backward, conv2d_forward, conv2d_forward_cached,
    cross_entropy_loss, fc_backward, fc_forward, init_batchnorm, init_conv,
    init_fc, relu, relu_backward,
)
from .tensor import DEFAULT_DTYPE, ShapeError

__all__ = [
    'ConvBlock',
    'ConvNetModel',
    'ActivationStats',
    'MissingBatchNormError',
    'CONVNET4_BLOCKS',
    'build_convnet',
    'build_convnet4',
    'forward',
    'run_with_taps',
    'forward_with_stats',
    'per_example_stats',
    'loss_and_grads',
    'refresh_bn_statistics',
    'predict_classes',
    'evaluate_classifier',
]

# (out_channels, kernel, stride); out_channels None means "width"
CONVNET4_BLOCKS = ((None, 4, 1), (None, 4, 2), (None, 4, 2), (None, 3, 2))
CONVNET4_WIDTH = 300
CONVNET4_INPUT = 32


class MissingBatchNormError(LookupError):
    """Raised when BN statistics are requested from a model without BN layers

    Reference statistics for such a model have to come from a pass over the
    training data instead.
    """
    pass


@dataclass
class ConvBlock:
    conv: ConvLayerParams
    bn: Optional[BatchNormParams] = None


@dataclass(eq=False)
class ConvNetModel:
    """Conv (-> BN) -> ReLU blocks, then average pooling and one FC layer"""
    blocks: List[ConvBlock]
    pool: int
    fc: FcLayerParams
    input_size: int
    in_channels: int = 3
    channel_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = [(l, c) for l, b in enumerate(self.blocks)
                for c in range(b.conv.out_channels)]
        self.channel_index = np.array(rows, dtype=np.int64).reshape(-1, 2)

    def __repr__(self):
        widths = [b.conv.out_channels for b in self.blocks]
        return (f"ConvNetModel(widths={widths}, pool={self.pool}, "
                f"classes={self.num_classes}, input={self.input_size})")

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def num_channels(self) -> int:
        return len(self.channel_index)

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    @property
    def channel_layers(self) -> np.ndarray:
        """Layer number (0-based) of each tapped channel"""
        return self.channel_index[:, 0]

    @property
    def has_batchnorm(self) -> bool:
        return all(b.bn is not None for b in self.blocks)

    @property
    def dtype(self):
        return self.fc.weights.dtype

    def layers(self) -> Iterator[Tuple[str, object]]:
        for i, block in enumerate(self.blocks):
            yield f'block{i}.conv', block.conv
            if block.bn is not None:
                yield f'block{i}.bn', block.bn
        yield 'fc', self.fc

    def parameters(self) -> Iterator[Tuple[str, object, str]]:
        """Yield (name, layer, attribute) for every trainable tensor"""
        for name, layer in self.layers():
            for attr in layer.trainable:
                yield f'{name}.{attr}', layer, attr

    def state(self) -> dict:
        """All tensors, trainable or not, keyed by dotted name"""
        d = {}
        for name, layer in self.layers():
            for attr, value in vars(layer).items():
                if isinstance(value, np.ndarray):
                    d[f'{name}.{attr}'] = value
        return d

    def copy(self) -> 'ConvNetModel':
        return self.astype(self.dtype)

    def astype(self, dtype) -> 'ConvNetModel':
        def cast(layer):
            if layer is None:
                return None
            arrays = {k: v.astype(dtype, copy=True) for k, v in vars(layer).items()
                      if isinstance(v, np.ndarray)}
            return replace(layer, **arrays)

        return ConvNetModel(
            blocks=[ConvBlock(cast(b.conv), cast(b.bn)) for b in self.blocks],
            pool=self.pool, fc=cast(self.fc), input_size=self.input_size,
            in_channels=self.in_channels,
        )


@dataclass
class ActivationStats:
    per_channel_mean: np.ndarray
    per_channel_sqmean: Optional[np.ndarray]
    batch_size: int


def build_convnet(blocks: Sequence[Tuple[int, int, int]], num_classes: int,
                  seed, input_size=CONVNET4_INPUT, in_channels=3, pool=2,
                  padding=0, batchnorm=True, dtype=DEFAULT_DTYPE) -> ConvNetModel:
    """Build a freshly initialized ConvNet from (out_channels, kernel, stride) triples"""
    if num_classes < 2:
        raise ValueError(f"Need at least 2 classes, not {num_classes}")
    rng = np.random.default_rng(seed)
    size, ch = input_size, in_channels
    conv_blocks = []
    for out_ch, kernel, stride in blocks:
        conv = init_conv(ch, out_ch, kernel, stride, rng, padding=padding, dtype=dtype)
        size = conv.output_size(size)
        if size < 1:
            raise ShapeError(f"Input size {input_size} too small for this stack")
        bn = init_batchnorm(out_ch, dtype=dtype) if batchnorm else None
        conv_blocks.append(ConvBlock(conv, bn))
        ch = out_ch

    pooled = size // pool
    if pooled < 1:
        raise ShapeError(f"Final map {size}x{size} smaller than pool window {pool}")
    fc = init_fc(ch * pooled * pooled, num_classes, rng, dtype=dtype)
    return ConvNetModel(conv_blocks, pool, fc, input_size, in_channels)


def build_convnet4(num_classes=10, seed=0, width=CONVNET4_WIDTH,
                   dtype=DEFAULT_DTYPE) -> ConvNetModel:
    """The 4-layer ConvNet: 32 -> 29 -> 13 -> 5 -> 2 -> pool -> 1 -> FC"""
    blocks = [(width if o is None else o, k, s) for o, k, s in CONVNET4_BLOCKS]
    return build_convnet(blocks, num_classes, seed, input_size=CONVNET4_INPUT,
                         pool=2, dtype=dtype)


def _check_input(model: ConvNetModel, x):
    if x.ndim != 4 or x.shape[1:] != (model.in_channels, model.input_size,
                                      model.input_size):
        raise ShapeError(
            f"Model expects input [B, {model.in_channels}, {model.input_size}, "
            f"{model.input_size}], got {x.shape}")


def _bn_eval(z, bn: BatchNormParams):
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    shift = bn.beta - bn.running_mean * scale
    return z * scale[None, :, None, None] + shift[None, :, None, None]


def run_with_taps(model: ConvNetModel, x, tap=None):
    """Inference pass calling tap(z) with each convolution output"""
    _check_input(model, x)
    h = x
    for block in model.blocks:
        z, _ = conv2d_forward_cached(h, block.conv)
        if tap is not None:
            tap(z)
        if block.bn is not None:
            z = _bn_eval(z, block.bn)
        h = relu(z)
    pooled = avgpool2d(h, model.pool)
    return fc_forward(pooled.reshape(len(x), -1), model.fc)


def forward(model: ConvNetModel, x) -> np.ndarray:
    """Plain inference pass (BN uses running statistics)"""
    return run_with_taps(model, x)


def per_example_stats(model: ConvNetModel, x, second_moment=True):
    """One pass returning logits and [B, C] spatial means at every tap

    With *second_moment*, spatial means of the squared activations are
    returned as well; otherwise the third element is None.
    """
    means, sqmeans = [], []

    def tap(z):
        means.append(z.mean(axis=(2, 3)))
        if second_moment:
            sqmeans.append(np.square(z).mean(axis=(2, 3)))

    logits = run_with_taps(model, x, tap)
    return (logits, np.concatenate(means, axis=1),
            np.concatenate(sqmeans, axis=1) if second_moment else None)


def forward_with_stats(model: ConvNetModel, x, second_moment=True):
    """Logits plus per-channel batch statistics from the same single pass

    The statistics are averaged over the batch and all spatial positions of
    each convolution output, the place whose mean BN's running average tracks.
    """
    logits, means, sqmeans = per_example_stats(model, x, second_moment)
    stats = ActivationStats(
        per_channel_mean=means.mean(axis=0),
        per_channel_sqmean=sqmeans.mean(axis=0) if second_moment else None,
        batch_size=len(x),
    )
    return logits, stats


class BackpropResult(NamedTuple):
    loss: float
    logits: np.ndarray
    grads: dict
    relu_masks: list


def loss_and_grads(model: ConvNetModel, x, labels, mode='train',
                   update_running=True) -> BackpropResult:
    """Forward + backward pass for cross-entropy on one minibatch

    Gradients are keyed like :meth:`ConvNetModel.parameters`.
    """
    _check_input(model, x)
    caches = []
    masks = []
    h = x
    for block in model.blocks:
        z, conv_cache = conv2d_forward_cached(h, block.conv)
        bn_cache = None
        if block.bn is not None:
            (z, _, _), bn_cache = batchnorm_forward_cached(
                z, block.bn, mode, update_running)
        caches.append((conv_cache, bn_cache, z))
        masks.append(z > 0)
        h = relu(z)

    pooled = avgpool2d(h, model.pool)
    flat = pooled.reshape(len(x), -1)
    logits = fc_forward(flat, model.fc)
    loss, dlogits = cross_entropy_loss(logits, labels)

    grads = {}
    dflat, grads['fc.weights'], grads['fc.bias'] = fc_backward(dlogits, flat, model.fc)
    dh = avgpool2d_backward(dflat.reshape(pooled.shape), h.shape, model.pool)
    for i in reversed(range(model.num_layers)):
        block = model.blocks[i]
        conv_cache, bn_cache, pre_relu = caches[i]
        dz = relu_backward(dh, pre_relu)
        if block.bn is not None:
            dz, grads[f'block{i}.bn.gamma'], grads[f'block{i}.bn.beta'] = \
                batchnorm_backward(dz, bn_cache, block.bn)
        dh, grads[f'block{i}.conv.weights'], grads[f'block{i}.conv.bias'] = \
            conv2d_backward(dz, conv_cache, block.conv)

    return BackpropResult(loss, logits, grads, masks)


def refresh_bn_statistics(model: ConvNetModel, x):
    """Train-mode forward pass that only folds *x* into BN's running averages

    Nothing is computed past the last batch-norm layer and no weights change.
    """
    _check_input(model, x)
    h = x
    for block in model.blocks:
        z = conv2d_forward(h, block.conv)
        if block.bn is not None:
            z = batchnorm_forward(z, block.bn, 'train')[0]
        h = relu(z)


def predict_classes(model: ConvNetModel, x, batch_size=256) -> np.ndarray:
    out = [forward(model, x[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def evaluate_classifier(model: ConvNetModel, images, labels, batch_size=256) -> float:
    """Top-1 accuracy"""
    return float((predict_classes(model, images, batch_size) == labels).mean())
