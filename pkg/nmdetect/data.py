"""Image datasets, synthetic texture distributions and protocol splits.

Images are held as float arrays ``[N, 3, H, W]``: raw pixels scaled to
[0, 1], then normalized per channel. OOD datasets are normalized with the
in-distribution constants, the way a trained classifier would consume them.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np
import structlog

from .config import ConfigError, parse_floats
from .streams import PERMUTE, SPLIT, SYNTH_ID, SYNTH_OOD, substream

log = structlog.get_logger()

__all__ = [
    'DataError',
    'ProtocolError',
    'Normalization',
    'ImageDataset',
    'CIFAR_NORM',
    'load_cifar_binary',
    'write_cifar_binary',
    'load_raw_u8',
    'write_raw_u8',
    'DatasetConfig',
    'load_dataset',
    'TextureSpec',
    'ID_SPEC',
    'FAR_OOD_SPEC',
    'NEAR_OOD_SPEC',
    'SynthConfig',
    'synth_textures',
    'synth_pair',
    'block_permute',
    'Protocol',
    'ProtocolSizes',
    'DetectorSet',
    'ProtocolSplit',
    'make_protocol_split',
]

CIFAR_SIZE = 32
CIFAR_PIXELS = 3 * CIFAR_SIZE * CIFAR_SIZE
CIFAR_RECORD = 1 + CIFAR_PIXELS
FEW_SHOT = 25


class DataError(ValueError):
    """Raised for unreadable or inconsistent data"""
    pass


class ProtocolError(DataError):
    """Raised when a protocol split can't be built from the data given"""
    pass


@dataclass(frozen=True)
class Normalization:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("Normalization mean and std differ in length")
        if any(s <= 0 for s in self.std):
            raise ValueError("Normalization std must be positive")

    def _arrays(self):
        return (np.asarray(self.mean)[None, :, None, None],
                np.asarray(self.std)[None, :, None, None])

    def apply(self, raw):
        mean, std = self._arrays()
        return (raw - mean) / std

    def invert(self, x):
        mean, std = self._arrays()
        return x * std + mean

    @classmethod
    def identity(cls, channels=3):
        return cls((0.0,) * channels, (1.0,) * channels)

    @classmethod
    def fit(cls, raw):
        """Per-channel constants measured on *raw* pixels"""
        std = raw.std(axis=(0, 2, 3))
        std[std < 1e-8] = 1.0
        return cls(tuple(raw.mean(axis=(0, 2, 3))), tuple(std))


CIFAR_NORM = Normalization((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))


@dataclass(eq=False)
class ImageDataset:
    images: np.ndarray  # normalized, [N, 3, H, W]
    labels: np.ndarray
    name: str
    norm: Normalization = field(default_factory=Normalization.identity)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) == 0:
            raise DataError(f"{self.name}: dataset is empty")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise DataError(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def __repr__(self):
        return f'ImageDataset({self.name!r}, n={len(self)}, shape={self.images.shape[1:]})'

    @classmethod
    def from_raw(cls, raw, labels, name, norm: Normalization):
        return cls(norm.apply(raw), labels, name, norm)

    def raw(self) -> np.ndarray:
        """Pixels in [0, 1] before normalization"""
        return self.norm.invert(self.images)

    def subset(self, idx, name=None) -> 'ImageDataset':
        return ImageDataset(self.images[idx], self.labels[idx],
                            name or self.name, self.norm)

    def with_normalization(self, norm: Normalization) -> 'ImageDataset':
        return ImageDataset.from_raw(self.raw(), self.labels, self.name, norm)


# File formats ---------------------------------------------------------------

def _cifar_files(path: Path, pattern):
    if path.is_dir():
        files = sorted(path.glob(pattern))
        if not files:
            raise DataError(f"No files matching {pattern!r} in {path}")
        return files
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return [path]


def load_cifar_binary(path, norm: Normalization = CIFAR_NORM, name='cifar',
                      pattern='*.bin') -> ImageDataset:
    """Load CIFAR binary batches: 1 label byte + 3072 pixel bytes per record

    *path* may be a single batch file or a directory, in which case every
    file matching *pattern* is read in sorted order.
    """
    chunks = []
    for f in _cifar_files(Path(path), pattern):
        buf = np.fromfile(f, dtype=np.uint8)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise DataError(
                f"{f}: size {len(buf)} is not a whole number of "
                f"{CIFAR_RECORD}-byte records (truncated file?)")
        chunks.append(buf.reshape(-1, CIFAR_RECORD))
        log.debug("read CIFAR batch", file=str(f), records=len(chunks[-1]))
    records = np.concatenate(chunks)
    raw = records[:, 1:].reshape(-1, 3, CIFAR_SIZE, CIFAR_SIZE) / 255.0
    log.info("loaded dataset", name=name, format='cifar', examples=len(records))
    return ImageDataset.from_raw(raw, records[:, 0], name, norm)


def _as_u8(images):
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise TypeError(f"Expected uint8 pixels, got {images.dtype}")
    return images


def write_cifar_binary(path, images, labels):
    """Write uint8 ``[N, 3, 32, 32]`` images as one CIFAR binary batch"""
    images = _as_u8(images)
    if images.shape[1:] != (3, CIFAR_SIZE, CIFAR_SIZE):
        raise DataError(f"CIFAR records hold [3, 32, 32] images, got {images.shape[1:]}")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("CIFAR labels must fit in one byte")
    records = np.concatenate(
        [labels.astype(np.uint8)[:, None], images.reshape(len(images), -1)], axis=1)
    records.tofile(path)


def load_raw_u8(path, n: int, h: int, w: int, norm: Normalization = CIFAR_NORM,
                name=None) -> ImageDataset:
    """Load *n* planar RGB uint8 images, optionally followed by *n* label bytes

    Without labels every example gets label 0.
    """
    path = Path(path)
    if n < 1:
        raise DataError("Raw dataset needs n >= 1")
    if not path.exists():
        raise DataError(f"{path} does not exist")
    buf = np.fromfile(path, dtype=np.uint8)
    pixels = n * 3 * h * w
    if len(buf) == pixels:
        labels = np.zeros(n, dtype=np.int64)
    elif len(buf) == pixels + n:
        labels = buf[pixels:]
    else:
        raise DataError(
            f"{path}: length {len(buf)} doesn't match {n} images of 3x{h}x{w} "
            f"({pixels} bytes, or {pixels + n} with labels)")
    raw = buf[:pixels].reshape(n, 3, h, w) / 255.0
    name = name or path.stem
    log.info("loaded dataset", name=name, format='raw', examples=n)
    return ImageDataset.from_raw(raw, labels, name, norm)


def write_raw_u8(path, images, labels=None):
    images = _as_u8(images)
    with open(path, 'wb') as f:
        f.write(np.ascontiguousarray(images).tobytes())
        if labels is not None:
            f.write(np.asarray(labels).astype(np.uint8).tobytes())


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    path: str
    format: str = 'cifar'
    n: Optional[int] = None
    height: int = CIFAR_SIZE
    width: int = CIFAR_SIZE
    mean: Tuple[float, ...] = CIFAR_NORM.mean
    std: Tuple[float, ...] = CIFAR_NORM.std
    pattern: str = '*.bin'

    def __post_init__(self):
        if self.format not in ('cifar', 'raw'):
            raise ConfigError(f"Unknown dataset format {self.format!r} (cifar or raw)")
        if self.format == 'raw' and self.n is None:
            raise ConfigError("Raw datasets need n (number of images)")

    @property
    def norm(self) -> Normalization:
        return Normalization(tuple(self.mean), tuple(self.std))

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> 'DatasetConfig':
        unknown = set(kv) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"Unknown dataset config keys: {', '.join(sorted(unknown))}")
        try:
            args = dict(kv)
            for k in ('n', 'height', 'width'):
                if k in args:
                    args[k] = int(args[k])
            for k in ('mean', 'std'):
                if k in args:
                    args[k] = parse_floats(args[k], k)
            return cls(**args)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid dataset config: {e}") from None


def load_dataset(config: DatasetConfig, norm: Optional[Normalization] = None) -> ImageDataset:
    """Load the dataset *config* describes

    *norm* overrides the configured constants, e.g. to normalize an OOD set
    with the ID set's constants.
    """
    norm = norm or config.norm
    if config.format == 'cifar':
        return load_cifar_binary(config.path, norm, config.name, config.pattern)
    return load_raw_u8(config.path, config.n, config.height, config.width,
                       norm, config.name)


# Synthetic textures ---------------------------------------------------------

@dataclass(frozen=True)
class TextureSpec:
    """A class-conditional distribution of colored, oriented textures

    Class k draws a pattern of frequency ``frequencies[k]`` (cycles per
    pixel) and orientation ``orientations[k]`` (degrees) with a random
    phase. *family* is ``'grating'`` (sinusoid) or ``'checker'``; checkers
    are scaled to the same variance as gratings.
    """
    family: str = 'grating'
    frequencies: Tuple[float, ...] = (0.125, 0.125, 0.125, 0.125)
    orientations: Tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)
    color_mean: Tuple[float, ...] = (0.45, 0.45, 0.45)
    color_weights: Tuple[float, ...] = (1.0, 0.7, 0.4)
    amplitude: float = 0.3
    noise: float = 0.05
    envelope_sigma: Optional[float] = 10.0
    contrast_jitter: float = 0.2
    size: int = CIFAR_SIZE

    def __post_init__(self):
        if self.family not in ('grating', 'checker'):
            raise ValueError(f"Unknown texture family {self.family!r}")
        if len(self.frequencies) != len(self.orientations):
            raise ValueError("Need one frequency per orientation")
        if len(self.color_mean) != 3 or len(self.color_weights) != 3:
            raise ValueError("Colors are given per RGB channel")

    @property
    def num_classes(self):
        return len(self.orientations)

    def shift_color(self, delta: float) -> 'TextureSpec':
        return replace(self, color_mean=tuple(m + delta for m in self.color_mean))


ID_SPEC = TextureSpec()
# Checkers at about a quarter of the contrast, channel balance rotated.
# The color mean stays put, so the first layer's means don't move.
FAR_OOD_SPEC = TextureSpec(family='checker', color_weights=(0.4, 1.0, 0.7),
                           amplitude=0.08)
# Same family and colors, only the class frequencies move
NEAR_OOD_SPEC = TextureSpec(frequencies=(0.1875, 0.1875, 0.1875, 0.1875))

OOD_PRESETS = {'far': FAR_OOD_SPEC, 'near': NEAR_OOD_SPEC}


def synth_textures(spec: TextureSpec, n: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Raw images in [0, 1] and class labels drawn from *spec*

    Labels come in shuffled rounds holding each class once, so any aligned
    run of ``num_classes`` consecutive examples is class-balanced.
    """
    s = spec.size
    k = spec.num_classes
    rounds = np.tile(np.arange(k), (-(-n // k), 1))
    labels = rng.permuted(rounds, axis=1).ravel()[:n]
    theta = np.deg2rad(np.asarray(spec.orientations))[labels][:, None, None]
    freq = np.asarray(spec.frequencies)[labels][:, None, None]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    phase = rng.uniform(0, 2 * np.pi, (n, 2, 1, 1))

    if spec.family == 'grating':
        pattern = np.sin(2 * np.pi * freq * u + phase[:, 0])
    else:
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        pattern = np.sqrt(0.5) * np.sign(
            np.sin(2 * np.pi * freq * u + phase[:, 0])
            * np.sin(2 * np.pi * freq * v + phase[:, 1]))

    if spec.envelope_sigma is not None:
        centre = rng.uniform(s / 4, 3 * s / 4, (n, 2, 1, 1))
        d2 = (xx - centre[:, 0]) ** 2 + (yy - centre[:, 1]) ** 2
        pattern = pattern * np.exp(-d2 / (2 * spec.envelope_sigma ** 2))

    contrast = 1 + spec.contrast_jitter * rng.uniform(-1, 1, (n, 1, 1, 1))
    weights = np.asarray(spec.color_weights)[None, :, None, None]
    mean = np.asarray(spec.color_mean)[None, :, None, None]
    raw = (mean + spec.amplitude * contrast * weights * pattern[:, None]
           + spec.noise * rng.standard_normal((n, 3, s, s)))
    return np.clip(raw, 0.0, 1.0), labels


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n: int = 1000
    n_ood: Optional[int] = None
    id_spec: TextureSpec = ID_SPEC
    ood_spec: TextureSpec = FAR_OOD_SPEC


def synth_pair(config: SynthConfig) -> Tuple[ImageDataset, ImageDataset]:
    """An ID dataset with class labels and an OOD dataset, both from one seed

    The normalization constants are measured on the ID set and applied to
    both.
    """
    n_ood = config.n if config.n_ood is None else config.n_ood
    if config.n < 1 or n_ood < 1:
        raise DataError("Synthetic datasets need n >= 1")
    id_raw, id_labels = synth_textures(config.id_spec, config.n,
                                       substream(config.seed, SYNTH_ID))
    ood_raw, ood_labels = synth_textures(config.ood_spec, n_ood,
                                         substream(config.seed, SYNTH_OOD))
    norm = Normalization.fit(id_raw)
    log.info("synthesized datasets", id=config.n, ood=n_ood,
             ood_family=config.ood_spec.family)
    return (ImageDataset.from_raw(id_raw, id_labels, 'synth-id', norm),
            ImageDataset.from_raw(ood_raw, ood_labels, 'synth-ood', norm))


# Block permutation ----------------------------------------------------------

def block_permute(dataset, block=8, seed=0, permutations=None):
    """Shuffle the positions of non-overlapping block x block tiles

    Each image gets its own permutation, drawn from the ``permute`` stream
    of *seed* unless *permutations* (``[N, n_blocks]``) is given. Accepts an
    :class:`ImageDataset` or an image array and returns the same kind.
    """
    images = dataset.images if isinstance(dataset, ImageDataset) else np.asarray(dataset)
    n, c, h, w = images.shape
    if h % block or w % block:
        raise DataError(f"Image size {h}x{w} is not divisible by block size {block}")
    bh, bw = h // block, w // block
    if permutations is None:
        rng = substream(seed, PERMUTE)
        permutations = np.argsort(rng.random((n, bh * bw)), axis=1)
    permutations = np.asarray(permutations)
    if permutations.shape != (n, bh * bw):
        raise DataError(f"Expected permutations of shape {(n, bh * bw)}, got {permutations.shape}")

    tiles = images.reshape(n, c, bh, block, bw, block).transpose(0, 2, 4, 1, 3, 5)
    tiles = tiles.reshape(n, bh * bw, c, block, block)
    tiles = np.take_along_axis(tiles, permutations[:, :, None, None, None], axis=1)
    out = tiles.reshape(n, bh, bw, c, block, block).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(n, c, h, w)
    if isinstance(dataset, ImageDataset):
        return ImageDataset(out, dataset.labels.copy(), dataset.name + '-permuted',
                            dataset.norm)
    return out


# Protocols ------------------------------------------------------------------

class Protocol(Enum):
    full = 'full'
    few_shot = 'few-shot'
    zero_shot = 'zero-shot'
    transfer = 'transfer'


@dataclass(frozen=True)
class ProtocolSizes:
    """Examples per class (ID and OOD each) for detector training and eval

    ``eval_per_class=None`` uses everything left after training. Few-shot
    training always uses 25 per class.
    """
    train_per_class: int = 500
    eval_per_class: Optional[int] = None

    def __post_init__(self):
        if self.train_per_class < 1:
            raise ValueError("train_per_class must be at least 1")
        if self.eval_per_class is not None and self.eval_per_class < 1:
            raise ValueError("eval_per_class must be at least 1")


@dataclass
class DetectorSet:
    """ID and OOD images kept in separate blocks, labels 0 and 1"""
    id_images: np.ndarray
    ood_images: np.ndarray
    id_index: np.ndarray   # rows of the ID dataset
    ood_index: np.ndarray  # rows of the source named by ood_source
    ood_source: str

    @property
    def sizes(self):
        return len(self.id_images), len(self.ood_images)


@dataclass
class ProtocolSplit:
    detector_train: DetectorSet
    detector_eval: DetectorSet
    protocol: Protocol

    def audit(self):
        """Raise ProtocolError if any example is in both train and eval"""
        tr, ev = self.detector_train, self.detector_eval
        if np.intersect1d(tr.id_index, ev.id_index).size:
            raise ProtocolError("overlap detected between train and eval ID examples")
        if tr.ood_source == ev.ood_source and \
                np.intersect1d(tr.ood_index, ev.ood_index).size:
            raise ProtocolError("overlap detected between train and eval OOD examples")


def _take(available, n_train, n_eval, what):
    if n_train > available:
        raise ProtocolError(
            f"{what}: {n_train} training examples required, only {available} available")
    left = available - n_train
    if n_eval is None:
        n_eval = left
    if n_eval < 1 or n_eval > left:
        raise ProtocolError(
            f"{what}: {max(n_eval, 1)} evaluation examples required after "
            f"{n_train} for training, only {left} available")
    return n_eval


def make_protocol_split(id_ds: ImageDataset, ood_ds: ImageDataset,
                        protocol: Protocol, seed: int,
                        sizes: ProtocolSizes = ProtocolSizes(),
                        ood_eval: Optional[ImageDataset] = None) -> ProtocolSplit:
    """Sample detector training and evaluation sets for one access protocol

    - full: real ID and OOD examples for both training and evaluation.
    - few_shot: exactly 25 ID and 25 OOD training examples.
    - zero_shot: the training OOD examples are block-permuted copies of the
      training ID examples; evaluation uses the real OOD set.
    - transfer: training OOD comes from *ood_ds*, evaluation OOD from
      *ood_eval*.
    """
    protocol = Protocol(protocol)
    rng = substream(seed, SPLIT)
    n_train = FEW_SHOT if protocol is Protocol.few_shot else sizes.train_per_class

    if protocol is Protocol.few_shot and len(ood_ds) < FEW_SHOT:
        raise ProtocolError(
            f"few-shot protocol needs {FEW_SHOT} OOD training examples "
            f"({FEW_SHOT} required), only {len(ood_ds)} available")

    id_eval_n = _take(len(id_ds), n_train, sizes.eval_per_class, f"ID set {id_ds.name}")
    id_order = rng.permutation(len(id_ds))
    id_train, id_eval = id_order[:n_train], id_order[n_train:n_train + id_eval_n]

    if protocol in (Protocol.full, Protocol.few_shot):
        ood_eval_n = _take(len(ood_ds), n_train, sizes.eval_per_class,
                           f"OOD set {ood_ds.name}")
        order = rng.permutation(len(ood_ds))
        train_ood_idx = order[:n_train]
        train_ood = ood_ds.images[train_ood_idx]
        eval_ood_idx = order[n_train:n_train + ood_eval_n]
        train_source = eval_source = ood_ds.name
        eval_ood = ood_ds.images[eval_ood_idx]
    else:
        if protocol is Protocol.zero_shot:
            train_ood_idx = id_train
            train_ood = block_permute(id_ds.images[id_train], seed=seed)
            train_source = id_ds.name + '-permuted'
            eval_from = ood_ds
        else:
            if ood_eval is None:
                raise ProtocolError("transfer protocol needs a separate evaluation OOD set")
            if n_train > len(ood_ds):
                raise ProtocolError(
                    f"OOD set {ood_ds.name}: {n_train} training examples required, "
                    f"only {len(ood_ds)} available")
            train_ood_idx = rng.permutation(len(ood_ds))[:n_train]
            train_ood = ood_ds.images[train_ood_idx]
            train_source = ood_ds.name
            eval_from = ood_eval
        ood_eval_n = _take(len(eval_from), 0, sizes.eval_per_class,
                           f"OOD set {eval_from.name}")
        eval_ood_idx = rng.permutation(len(eval_from))[:ood_eval_n]
        eval_ood = eval_from.images[eval_ood_idx]
        eval_source = eval_from.name

    split = ProtocolSplit(
        DetectorSet(id_ds.images[id_train], train_ood, id_train, train_ood_idx,
                    train_source),
        DetectorSet(id_ds.images[id_eval], eval_ood, id_eval, eval_ood_idx,
                    eval_source),
        protocol,
    )
    split.audit()
    log.info("protocol split", protocol=protocol.value,
             train=split.detector_train.sizes, eval=split.detector_eval.sizes)
    return split
