"""Named random streams derived from one root seed

Each component draws from its own stream (``"train"``, ``"split"``,
``"permute"``...), so changing how much randomness one of them consumes
doesn't shift any of the others.
"""
import zlib

import numpy as np

TRAIN = 'train'
SPLIT = 'split'
PERMUTE = 'permute'
SYNTH_ID = 'synth-id'
SYNTH_OOD = 'synth-ood'
DETECTOR = 'detector'


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode('utf-8'))])


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def substream_int(seed: int, name: str) -> int:
    """An integer seed for APIs that take one rather than a Generator"""
    return int(stream_seed(seed, name).generate_state(1)[0])
