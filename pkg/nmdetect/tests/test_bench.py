import io

import numpy as np
import pandas as pd
import pytest

from nmdetect.bench import *
from nmdetect.detector import MlpConfig, fit_lr, fit_mlp
from nmdetect.model import build_convnet4
from nmdetect.nmd import VectorKind, extract_vectors, reference_from_bn


@pytest.fixture(scope='module')
def small():
    model = build_convnet4(num_classes=3, seed=0, width=8)
    ref = reference_from_bn(model)
    images = np.random.default_rng(0).standard_normal((12, 3, 32, 32))
    x = extract_vectors(model, images, ref)
    y = np.r_[np.zeros(6), np.ones(6)]
    return model, ref, images, fit_lr(x, y)


def test_run_bench(small):
    model, ref, images, det = small
    report = run_bench(model, ref, det, images, repeats=5, warmup=2)
    assert report.repeats == 5 and report.warmup == 2
    for v in (report.plain_forward_ms, report.nmd_extract_ms, report.detector_ms,
              report.detector_train_s):
        assert v > 0
    assert report.total_ms >= report.plain_forward_ms
    assert report.total_ms >= report.nmd_extract_ms
    assert report.overhead_ratio == report.nmd_extract_ms / report.plain_forward_ms


def test_bench_concat_mlp(small):
    model, ref, images, _ = small
    x = extract_vectors(model, images, ref, VectorKind.nmd_concat_nvd)
    det = fit_mlp(x, np.r_[np.zeros(6), np.ones(6)], MlpConfig(hidden=4, epochs=1),
                  VectorKind.nmd_concat_nvd)
    report = run_bench(model, ref, det, images, repeats=3, warmup=0)
    assert report.detector_train_s > 0


def test_bench_arguments(small):
    model, ref, images, det = small
    with pytest.raises(ValueError):
        run_bench(model, ref, det, images, repeats=0)
    with pytest.raises(ValueError):
        run_bench(model, ref, det, images, warmup=-1)


def test_bench_csv(small):
    model, ref, images, det = small
    report = run_bench(model, ref, det, images, repeats=2, warmup=0)
    df = pd.read_csv(io.StringIO(write_bench_csv(report)))
    assert list(df.columns) == ['plain_forward_ms', 'nmd_extract_ms', 'detector_ms',
                                'total_ms', 'detector_train_s', 'repeats', 'warmup']
    assert df['repeats'][0] == 2


def test_detector_training_time(small):
    model, ref, images, det = small
    assert time_detector_training(model, ref, det, images, seed=1) > 0


def test_total_covers_plain_pass_every_run(small):
    model, ref, images, det = small
    for repeats in (1, 2, 7):
        report = run_bench(model, ref, det, images, repeats=repeats, warmup=0)
        assert report.total_ms >= report.plain_forward_ms
        assert report.total_ms >= report.detector_ms
