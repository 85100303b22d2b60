"""End-to-end protocol experiments.

Split the data for a protocol, extract discrepancy vectors for groups of
examples, train a detector on the training vectors and evaluate it (and the
detector-free average-magnitude score) on the evaluation vectors.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from .data import ImageDataset, Protocol, ProtocolSizes, ProtocolSplit, make_protocol_split
from .detector import (
    FirstKResult, LayerImportance, LrConfig, LrDetector, MlpConfig, fit_lr, fit_mlp,
    first_k_layers_eval, layer_importance, predict, write_importance_csv,
)
from .metrics import EvalReport, ScoredSet, evaluate, write_report_csv, write_roc_csv
from .model import ConvNetModel
from .nmd import ReferenceStats, VectorKind, avg_magnitude_scores, extract_vectors, \
    vector_channel_index
from .streams import DETECTOR, substream_int

log = structlog.get_logger()

DETECTOR_KINDS = ('lr', 'mlp')


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: Protocol = Protocol.full
    vector: VectorKind = VectorKind.nmd
    detector: str = 'lr'
    batch_size: int = 1
    seed: int = 0
    sizes: ProtocolSizes = ProtocolSizes()
    lr: LrConfig = LrConfig()
    mlp: MlpConfig = MlpConfig()
    first_k: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.detector not in DETECTOR_KINDS:
            raise ValueError(f"Unknown detector {self.detector!r} (lr or mlp)")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def fitter(self):
        """``fit(x, y)`` for the configured detector, seeded from ``detector``"""
        if self.detector == 'lr':
            return lambda x, y: fit_lr(x, y, self.lr, self.vector)
        cfg = self.mlp
        seeded = MlpConfig(cfg.hidden, cfg.dropout_p, cfg.lr, cfg.momentum,
                           cfg.epochs, cfg.batch_size,
                           substream_int(self.seed, DETECTOR))
        return lambda x, y: fit_mlp(x, y, seeded, self.vector)


@dataclass
class LabeledVectors:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def from_blocks(cls, id_vectors, ood_vectors):
        return cls(np.concatenate([id_vectors, ood_vectors]),
                   np.r_[np.zeros(len(id_vectors), np.int64),
                         np.ones(len(ood_vectors), np.int64)])


@dataclass
class ExperimentResult:
    detector: object
    channel_index: np.ndarray
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    avg_reports: Dict[str, EvalReport] = field(default_factory=dict)
    importance: Optional[LayerImportance] = None
    first_k: List[FirstKResult] = field(default_factory=list)

    @property
    def report(self) -> EvalReport:
        """Report for the first evaluation OOD set"""
        return next(iter(self.reports.values()))


def split_vectors(model: ConvNetModel, ref: ReferenceStats, split: ProtocolSplit,
                  config: ExperimentConfig):
    def vecs(images):
        return extract_vectors(model, images, ref, config.vector, config.batch_size,
                               workers=config.workers)

    tr, ev = split.detector_train, split.detector_eval
    train = LabeledVectors.from_blocks(vecs(tr.id_images), vecs(tr.ood_images))
    evaluation = LabeledVectors.from_blocks(vecs(ev.id_images), vecs(ev.ood_images))
    for what, lv in (('train', train), ('eval', evaluation)):
        if len(np.unique(lv.y)) < 2:
            raise ValueError(
                f"Detector {what} set has no complete batches of {config.batch_size} "
                "for one class")
    return train, evaluation


def _evaluate_on(detector, vectors: LabeledVectors):
    det_report = evaluate(ScoredSet(predict(detector, vectors.x), vectors.y))
    avg_report = evaluate(ScoredSet(avg_magnitude_scores(vectors.x), vectors.y))
    return det_report, avg_report


def run_experiment(model: ConvNetModel, ref: ReferenceStats, id_ds: ImageDataset,
                   ood_ds: ImageDataset, config: ExperimentConfig = ExperimentConfig(),
                   eval_oods: Sequence[ImageDataset] = ()) -> ExperimentResult:
    """Run one protocol end to end

    For the transfer protocol, the detector is trained with *ood_ds* and
    evaluated on each of *eval_oods* in turn; the other protocols evaluate
    on held-out examples of *ood_ds*.
    """
    if config.protocol is Protocol.transfer:
        if not eval_oods:
            raise ValueError("Transfer experiments need at least one evaluation OOD set")
        splits = [make_protocol_split(id_ds, ood_ds, config.protocol, config.seed,
                                      config.sizes, ood_eval=e) for e in eval_oods]
    else:
        splits = [make_protocol_split(id_ds, ood_ds, config.protocol, config.seed,
                                      config.sizes)]

    channel_index = vector_channel_index(ref, config.vector)
    fit = config.fitter()
    train, evaluation = split_vectors(model, ref, splits[0], config)
    detector = fit(train.x, train.y)
    result = ExperimentResult(detector, channel_index)

    for i, split in enumerate(splits):
        if i:
            # Same seed, so the ID split and training OOD are unchanged
            _, evaluation = split_vectors(model, ref, split, config)
        name = split.detector_eval.ood_source
        result.reports[name], result.avg_reports[name] = _evaluate_on(detector, evaluation)
        log.info("evaluated", ood=name, auroc=result.reports[name].auroc,
                 tnr95=result.reports[name].tnr95, acc=result.reports[name].acc,
                 avg_auroc=result.avg_reports[name].auroc)
        if i == 0 and config.first_k:
            result.first_k = first_k_layers_eval(train.x, train.y, evaluation.x,
                                                 evaluation.y, channel_index, fit)

    if isinstance(detector, LrDetector):
        result.importance = layer_importance(detector, channel_index)
    return result


def write_first_k_csv(results: List[FirstKResult], path=None):
    df = pd.DataFrame(results, columns=['k', 'dim', 'auroc'])
    return df.to_csv(path, index=False)


def write_experiment_reports(result: ExperimentResult, out_dir) -> List[Path]:
    """Write every report of *result* into *out_dir*; returns the paths"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(writer, obj, name):
        path = out_dir / name
        writer(obj, path)
        written.append(path)

    for name, report in result.reports.items():
        emit(write_report_csv, report, f'report-{name}.csv')
        emit(write_roc_csv, report, f'roc-{name}.csv')
        emit(write_report_csv, result.avg_reports[name], f'avg-report-{name}.csv')
    if result.importance is not None:
        emit(write_importance_csv, result.importance, 'layer-importance.csv')
    if result.first_k:
        emit(write_first_k_csv, result.first_k, 'first-k.csv')
    return written
