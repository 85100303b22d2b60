"""Save and load ConvNet checkpoints in the ``NMDK`` envelope"""
import numpy as np
import structlog

from .envelope import Envelope, EnvelopeError, FileKind
from .layers import BatchNormParams, ConvLayerParams, FcLayerParams
from .model import ConvBlock, ConvNetModel

log = structlog.get_logger()

TAG_META = b'META'
TAG_CONV = b'CONV'
TAG_BN = b'BNRM'
TAG_FC = b'FCLR'


def model_to_envelope(model: ConvNetModel) -> Envelope:
    env = Envelope(FileKind.model)
    env.add(TAG_META, 'model.geometry', np.array(
        [model.in_channels, model.input_size, model.pool, model.num_layers]))
    for i, block in enumerate(model.blocks):
        conv = block.conv
        env.add(TAG_CONV, f'block{i}.conv.weights', conv.weights)
        env.add(TAG_CONV, f'block{i}.conv.bias', conv.bias)
        env.add(TAG_CONV, f'block{i}.conv.geometry',
                np.array([conv.stride, conv.padding]))
        if block.bn is not None:
            bn = block.bn
            for attr in ('gamma', 'beta', 'running_mean', 'running_var'):
                env.add(TAG_BN, f'block{i}.bn.{attr}', getattr(bn, attr))
            env.add(TAG_BN, f'block{i}.bn.hyper', np.array([bn.momentum, bn.eps]))
    env.add(TAG_FC, 'fc.weights', model.fc.weights)
    env.add(TAG_FC, 'fc.bias', model.fc.bias)
    return env


def model_from_envelope(env: Envelope) -> ConvNetModel:
    try:
        in_channels, input_size, pool, n_blocks = (int(v) for v in env['model.geometry'])
        blocks = []
        for i in range(n_blocks):
            stride, padding = (int(v) for v in env[f'block{i}.conv.geometry'])
            conv = ConvLayerParams(env[f'block{i}.conv.weights'],
                                   env[f'block{i}.conv.bias'],
                                   stride=stride, padding=padding)
            bn = None
            if f'block{i}.bn.gamma' in env:
                momentum, eps = (float(v) for v in env[f'block{i}.bn.hyper'])
                bn = BatchNormParams(
                    gamma=env[f'block{i}.bn.gamma'],
                    beta=env[f'block{i}.bn.beta'],
                    running_mean=env[f'block{i}.bn.running_mean'],
                    running_var=env[f'block{i}.bn.running_var'],
                    momentum=momentum, eps=eps,
                )
            blocks.append(ConvBlock(conv, bn))
        fc = FcLayerParams(env['fc.weights'], env['fc.bias'])
    except KeyError as e:
        raise EnvelopeError(f"checkpoint is missing record {e}") from None
    return ConvNetModel(blocks, pool, fc, input_size, in_channels)


def save_checkpoint(model: ConvNetModel, path):
    model_to_envelope(model).write(path)
    log.debug("checkpoint saved", path=str(path), channels=model.num_channels)


def load_checkpoint(path) -> ConvNetModel:
    """Read a model written by :func:`save_checkpoint`

    Raises :class:`~.EnvelopeError` for bad magic bytes, an unknown format
    version, truncation, or a file that holds something other than a model.
    """
    return model_from_envelope(Envelope.read(path, FileKind.model))
