"""End-to-end detection quality on the synthetic texture benchmark"""
import numpy as np
import pytest

from nmdetect.bench import run_bench
from nmdetect.data import ID_SPEC, ImageDataset, Protocol, ProtocolSizes, synth_textures
from nmdetect.detector import first_k_layers_eval, fit_lr
from nmdetect.experiment import ExperimentConfig, run_experiment
from nmdetect.metrics import ScoredSet, auroc
from nmdetect.model import build_convnet4
from nmdetect.nmd import VectorKind, avg_magnitude_scores, extract_vectors, reference_from_bn

from .conftest import SMALL_WIDTH

SIZES = ProtocolSizes(train_per_class=300, eval_per_class=300)


def avg_magnitude_auroc(model, id_images, ood_images, batch_size):
    ref = reference_from_bn(model)
    id_scores = avg_magnitude_scores(extract_vectors(model, id_images, ref, batch_size=batch_size))
    ood_scores = avg_magnitude_scores(extract_vectors(model, ood_images, ref, batch_size=batch_size))
    labels = np.r_[np.zeros(len(id_scores)), np.ones(len(ood_scores))]
    return auroc(ScoredSet(np.r_[id_scores, ood_scores], labels)), id_scores, ood_scores


def test_avg_magnitude_separates_batches_of_4(trained_model, heldout_data):
    id_ds, ood_ds = heldout_data
    score, id_scores, ood_scores = avg_magnitude_auroc(
        trained_model, id_ds.images[:400], ood_ds.images[:400], batch_size=4)
    assert len(id_scores) == len(ood_scores) == 100
    assert score >= 0.99
    # Paired batches: OOD has the larger mean |NMD| almost always
    assert (id_scores < ood_scores).mean() >= 0.95


def test_untrained_model_control(trained_model, heldout_data):
    id_ds, ood_ds = heldout_data
    untrained = build_convnet4(num_classes=4, seed=0, width=SMALL_WIDTH)
    trained_score, _, _ = avg_magnitude_auroc(
        trained_model, id_ds.images[:800], ood_ds.images[:800], batch_size=8)
    untrained_score, _, _ = avg_magnitude_auroc(
        untrained, id_ds.images[:800], ood_ds.images[:800], batch_size=8)
    assert trained_score - untrained_score >= 0.2


@pytest.fixture(scope='module')
def full_auroc(trained_model, heldout_data):
    id_ds, ood_ds = heldout_data
    result = run_experiment(trained_model, reference_from_bn(trained_model), id_ds, ood_ds,
                            ExperimentConfig(Protocol.full, sizes=SIZES, first_k=False))
    return result.report.auroc


def test_full_access_lr(full_auroc):
    assert full_auroc >= 0.95


def test_zero_shot_lr(trained_model, heldout_data, full_auroc):
    id_ds, ood_ds = heldout_data
    result = run_experiment(trained_model, reference_from_bn(trained_model), id_ds, ood_ds,
                            ExperimentConfig(Protocol.zero_shot, sizes=SIZES,
                                             first_k=False))
    assert result.report.auroc >= 0.90
    assert result.report.auroc >= 0.85 * full_auroc


def test_few_shot_lr(trained_model, heldout_data):
    id_ds, ood_ds = heldout_data
    result = run_experiment(trained_model, reference_from_bn(trained_model), id_ds, ood_ds,
                            ExperimentConfig(Protocol.few_shot, sizes=SIZES,
                                             first_k=False))
    assert result.detector.dim == trained_model.num_channels
    assert result.report.auroc >= 0.90


def test_first_layer_catches_color_shift(trained_model, heldout_data):
    id_ds, _ = heldout_data
    rng = np.random.default_rng(7)
    raw, labels = synth_textures(ID_SPEC.shift_color(0.1), 400, rng)
    shifted = ImageDataset.from_raw(raw, labels, 'shifted', id_ds.norm)
    ref = reference_from_bn(trained_model)

    id_vecs = extract_vectors(trained_model, id_ds.images[:400], ref)
    ood_vecs = extract_vectors(trained_model, shifted.images, ref)
    x = np.r_[id_vecs, ood_vecs]
    y = np.r_[np.zeros(400, dtype=int), np.ones(400, dtype=int)]
    train = np.r_[np.arange(200), 400 + np.arange(200)]
    test = np.r_[200 + np.arange(200), 600 + np.arange(200)]
    [result] = first_k_layers_eval(x[train], y[train], x[test], y[test],
                                   ref.channel_index, ks=[1])
    assert result.dim == SMALL_WIDTH
    assert result.auroc >= 0.9


def test_inference_overhead():
    model = build_convnet4(num_classes=10, seed=0, width=64)
    ref = reference_from_bn(model)
    rng = np.random.default_rng(0)
    images = rng.standard_normal((32, 3, 32, 32))
    x = extract_vectors(model, images, ref)
    det = fit_lr(x, np.arange(32) % 2, vector_kind=VectorKind.nmd)
    report = run_bench(model, ref, det, images, repeats=1000, warmup=20,
                       train_images=images[:8])
    assert report.overhead_ratio <= 1.25
    assert report.detector_ms <= 0.10 * report.plain_forward_ms
