"""Neural mean (and variance) discrepancy vectors.

The discrepancy of a channel is the difference between an input batch's
activation statistic and the same statistic over the training set. The
training-set side comes either for free from batch norm's running averages
or from one exact pass over the training data.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd
import structlog

from .envelope import Envelope, EnvelopeError, FileKind
from .model import (
    ActivationStats, ConvNetModel, MissingBatchNormError, forward_with_stats,
    per_example_stats, run_with_taps,
)
from .tensor import ShapeError, check_finite

log = structlog.get_logger()

TAG_REFS = b'REFS'


class ReferenceSource(Enum):
    bn_free_lunch = 1
    dataset_traversal = 2


class VectorKind(Enum):
    nmd = 'nmd'
    nvd = 'nvd'
    nmd_concat_nvd = 'concat'

    @property
    def needs_second_moment(self):
        return self is not VectorKind.nmd


@dataclass
class ReferenceStats:
    mean: np.ndarray
    var: np.ndarray
    source: ReferenceSource
    sample_count: int
    channel_index: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.var.shape or len(self.mean) != len(self.channel_index):
            raise ShapeError("Reference mean, variance and channel index differ in length")
        if (self.var < 0).any():
            raise ValueError("Reference variance can't be negative")

    @property
    def num_channels(self):
        return len(self.mean)


@dataclass
class NmdVector:
    values: np.ndarray
    channel_index: np.ndarray  # [len(values), 2] of (layer, channel)
    kind: VectorKind = VectorKind.nmd

    def __post_init__(self):
        if len(self.values) != len(self.channel_index):
            raise ShapeError(
                f"{len(self.values)} values for {len(self.channel_index)} channels")
        check_finite(self.values, f"{self.kind.value} vector")

    def __len__(self):
        return len(self.values)


def reference_from_bn(model: ConvNetModel) -> ReferenceStats:
    """Training-set channel statistics read straight from the BN buffers"""
    if not model.has_batchnorm:
        raise MissingBatchNormError(
            "Model has no batch norm statistics; use reference_from_dataset")
    mean = np.concatenate([b.bn.running_mean for b in model.blocks])
    var = np.concatenate([b.bn.running_var for b in model.blocks])
    return ReferenceStats(mean.copy(), var.copy(), ReferenceSource.bn_free_lunch,
                          sample_count=0, channel_index=model.channel_index.copy())


class _MomentAccumulator:
    """Streaming per-channel mean/variance, merged batch by batch"""
    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, z):
        n = z.shape[0] * z.shape[2] * z.shape[3]
        mean = z.mean(axis=(0, 2, 3))
        m2 = np.square(z - mean[None, :, None, None]).sum(axis=(0, 2, 3))
        if self.count == 0:
            self.count, self.mean, self.m2 = n, mean, m2
            return
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + np.square(delta) * (self.count * n / total)
        self.count = total


def reference_from_dataset(model: ConvNetModel, images, batch_size=256) -> ReferenceStats:
    """Exact channel statistics over one pass of *images*

    The result doesn't depend on *batch_size*, beyond floating-point rounding.
    """
    if len(images) == 0:
        raise ValueError("Can't compute reference statistics from an empty dataset")
    accs = [_MomentAccumulator() for _ in model.blocks]
    for start in range(0, len(images), batch_size):
        layer = iter(accs)
        run_with_taps(model, images[start:start + batch_size],
                      lambda z: next(layer).add(z))

    mean = np.concatenate([a.mean for a in accs])
    var = np.concatenate([a.m2 / a.count for a in accs])
    log.info("reference statistics traversed", examples=len(images),
             channels=len(mean))
    return ReferenceStats(mean, var, ReferenceSource.dataset_traversal,
                          sample_count=len(images),
                          channel_index=model.channel_index.copy())


def _check_lengths(stats: ActivationStats, ref: ReferenceStats):
    if len(stats.per_channel_mean) != ref.num_channels:
        raise ShapeError(
            f"Statistics have {len(stats.per_channel_mean)} channels, reference "
            f"has {ref.num_channels}")


def compute_nmd(stats: ActivationStats, ref: ReferenceStats) -> NmdVector:
    _check_lengths(stats, ref)
    return NmdVector(stats.per_channel_mean - ref.mean, ref.channel_index,
                     VectorKind.nmd)


def _batch_std(mean, sqmean):
    # Cancellation can push the variance slightly below zero
    return np.sqrt(np.maximum(0.0, sqmean - np.square(mean)))


def compute_nvd(stats: ActivationStats, ref: ReferenceStats) -> NmdVector:
    """Batch standard deviation minus training-set standard deviation"""
    _check_lengths(stats, ref)
    if stats.per_channel_sqmean is None:
        raise ValueError("NVD needs statistics collected with second_moment=True")
    values = _batch_std(stats.per_channel_mean, stats.per_channel_sqmean) \
        - np.sqrt(ref.var)
    return NmdVector(values, ref.channel_index, VectorKind.nvd)


def concat_nmd_nvd(nmd: NmdVector, nvd: NmdVector, standardizer=None) -> NmdVector:
    """All NMD entries then all NVD entries, optionally standardized

    *standardizer* is fitted on training-split concatenations, so it
    standardizes both halves dimension by dimension.
    """
    if nmd.kind is not VectorKind.nmd or nvd.kind is not VectorKind.nvd:
        raise ValueError(
            f"Expected an NMD and an NVD vector, got {nmd.kind.value} and "
            f"{nvd.kind.value}")
    if len(nmd) != len(nvd):
        raise ShapeError("NMD and NVD vectors differ in length")
    values = np.concatenate([nmd.values, nvd.values])
    if standardizer is not None:
        values = standardizer.apply(values)
    return NmdVector(values, np.concatenate([nmd.channel_index, nvd.channel_index]),
                     VectorKind.nmd_concat_nvd)


def avg_magnitude_score(nmd: NmdVector) -> float:
    """Mean absolute discrepancy, the detector-free OOD score"""
    if len(nmd) == 0:
        raise ValueError("Can't score an empty vector")
    return float(np.abs(nmd.values).mean())


def avg_magnitude_scores(vectors) -> np.ndarray:
    """Row-wise :func:`avg_magnitude_score` for a matrix of vectors"""
    vectors = np.asarray(vectors)
    if vectors.shape[-1] == 0:
        raise ValueError("Can't score empty vectors")
    return np.abs(vectors).mean(axis=-1)


def vector_channel_index(ref: ReferenceStats, kind: VectorKind) -> np.ndarray:
    if kind is VectorKind.nmd_concat_nvd:
        return np.concatenate([ref.channel_index, ref.channel_index])
    return ref.channel_index


def _group_rows(rows, group):
    n = (len(rows) // group) * group
    return rows[:n].reshape(-1, group, rows.shape[1]).mean(axis=1)


def vectors_from_moments(means, sqmeans, ref: ReferenceStats, kind: VectorKind):
    if kind is VectorKind.nmd:
        return means - ref.mean
    nvd = _batch_std(means, sqmeans) - np.sqrt(ref.var)
    if kind is VectorKind.nvd:
        return nvd
    return np.concatenate([means - ref.mean, nvd], axis=1)


def extract_vectors(model: ConvNetModel, images, ref: ReferenceStats,
                    kind: VectorKind = VectorKind.nmd, batch_size=1,
                    chunk_size=256, workers=1) -> np.ndarray:
    """Discrepancy vectors for consecutive groups of *batch_size* examples

    Returns an array with one row per group; a trailing partial group is
    dropped. Chunks are processed by *workers* threads, and rows always come
    back in input order.
    """
    if batch_size < 1:
        raise ValueError("Batch size must be at least 1")
    if len(ref.mean) != model.num_channels:
        raise ShapeError(
            f"Reference has {len(ref.mean)} channels, model has {model.num_channels}")
    n_groups = len(images) // batch_size
    if len(images) % batch_size:
        log.warning("dropping incomplete batch", leftover=len(images) % batch_size)
    step = max(batch_size, (chunk_size // batch_size) * batch_size)
    starts = range(0, n_groups * batch_size, step)

    def one_chunk(start):
        x = images[start:min(start + step, n_groups * batch_size)]
        _, means, sqmeans = per_example_stats(model, x, kind.needs_second_moment)
        # Equal spatial counts per example, so group means of example means
        # are the batch statistics.
        means = _group_rows(means, batch_size)
        if sqmeans is not None:
            sqmeans = _group_rows(sqmeans, batch_size)
        return vectors_from_moments(means, sqmeans, ref, kind)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_chunk, starts))
    else:
        parts = [one_chunk(s) for s in starts]
    width = len(ref.mean) * (2 if kind is VectorKind.nmd_concat_nvd else 1)
    out = np.concatenate(parts) if parts else np.empty((0, width))
    return check_finite(out, f"{kind.value} vectors")


def batch_vector(model: ConvNetModel, batch, ref: ReferenceStats,
                 kind: VectorKind = VectorKind.nmd, standardizer=None) -> NmdVector:
    """One discrepancy vector for a whole batch (stage 1 of detection)"""
    _, stats = forward_with_stats(model, batch, kind.needs_second_moment)
    if kind is VectorKind.nmd:
        return compute_nmd(stats, ref)
    if kind is VectorKind.nvd:
        return compute_nvd(stats, ref)
    return concat_nmd_nvd(compute_nmd(stats, ref), compute_nvd(stats, ref),
                          standardizer)


# Files ----------------------------------------------------------------------

def save_reference(ref: ReferenceStats, path):
    env = Envelope(FileKind.refs)
    env.add(TAG_REFS, 'mean', ref.mean)
    env.add(TAG_REFS, 'var', ref.var)
    env.add(TAG_REFS, 'channel_index', ref.channel_index)
    env.add(TAG_REFS, 'info', np.array([ref.source.value, ref.sample_count]))
    env.write(path)


def load_reference(path) -> ReferenceStats:
    env = Envelope.read(path, FileKind.refs)
    try:
        source, count = (int(v) for v in env['info'])
        return ReferenceStats(env['mean'], env['var'], ReferenceSource(source),
                              count, env['channel_index'])
    except KeyError as e:
        raise EnvelopeError(f"reference file is missing record {e}") from None


def write_vector_csv(vec: NmdVector, path: Optional[str] = None):
    """Write (or return, if *path* is None) one vector as a CSV table"""
    df = pd.DataFrame({
        'global_channel': np.arange(len(vec)),
        'layer': vec.channel_index[:, 0],
        'channel': vec.channel_index[:, 1],
        'value': vec.values,
    })
    return df.to_csv(path, index=False)
