import sys

import pytest
import structlog

from nmdetect.data import SynthConfig, synth_pair
from nmdetect.model import build_convnet4
from nmdetect.train import TrainConfig, train_classifier

SMALL_WIDTH = 24


@pytest.fixture(autouse=True)
def _rebind_log_stream():
    """Point structlog at the live stderr; cli.main binds whatever stream
    was current, which may be a capsys buffer closed by a previous test"""
    structlog.configure(logger_factory=structlog.PrintLoggerFactory(sys.stderr))


@pytest.fixture(scope='session')
def synth_data():
    """Classifier training data: synthetic ID textures + far-OOD checkers"""
    return synth_pair(SynthConfig(seed=0, n=768))


@pytest.fixture(scope='session')
def heldout_data(synth_data):
    """A separate draw, normalized like the training data"""
    norm = synth_data[0].norm
    id_ds, ood_ds = synth_pair(SynthConfig(seed=1, n=1200))
    return id_ds.with_normalization(norm), ood_ds.with_normalization(norm)


@pytest.fixture(scope='session')
def trained(synth_data):
    id_ds, _ = synth_data
    model = build_convnet4(num_classes=4, seed=0, width=SMALL_WIDTH)
    return train_classifier(model, id_ds.images, id_ds.labels,
                            TrainConfig(lr=0.01, epochs=8, batch_size=16, seed=0))


@pytest.fixture(scope='session')
def trained_model(trained):
    return trained.model
