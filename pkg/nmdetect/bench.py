"""Single-example latency of classification, vector extraction and detection"""
from dataclasses import asdict, dataclass
import time

import numpy as np
import pandas as pd
import structlog

from .data import block_permute
from .detector import Detector, fit_lr, fit_mlp, predict
from .model import ConvNetModel, forward, per_example_stats
from .nmd import ReferenceStats, vectors_from_moments, extract_vectors

log = structlog.get_logger()


@dataclass
class BenchReport:
    plain_forward_ms: float
    nmd_extract_ms: float
    detector_ms: float
    total_ms: float
    detector_train_s: float
    repeats: int
    warmup: int

    @property
    def overhead_ratio(self) -> float:
        return self.nmd_extract_ms / self.plain_forward_ms


def write_bench_csv(report: BenchReport, path=None):
    return pd.DataFrame([asdict(report)]).to_csv(path, index=False)


def time_detector_training(model: ConvNetModel, ref: ReferenceStats, detector: Detector,
                           images, seed=0) -> float:
    """Seconds to fit a detector like *detector* from scratch

    The training vectors come from *images* (label 0) and block-permuted
    copies of them (label 1); extracting them is not timed.
    """
    kind = detector.vector_kind
    id_vecs = extract_vectors(model, images, ref, kind)
    ood_vecs = extract_vectors(model, block_permute(images, seed=seed), ref, kind)
    x = np.concatenate([id_vecs, ood_vecs])
    y = np.r_[np.zeros(len(id_vecs)), np.ones(len(ood_vecs))]
    start = time.perf_counter()
    if detector.kind == 'lr':
        fit_lr(x, y, vector_kind=kind)
    else:
        fit_mlp(x, y, detector.config, kind)
    return time.perf_counter() - start


def run_bench(model: ConvNetModel, ref: ReferenceStats, detector: Detector, images,
              repeats=1000, warmup=20, train_images=None) -> BenchReport:
    """Median timings over *repeats* single-example runs, after *warmup* runs

    Plain and NMD passes are interleaved on the same example so that both
    see the same cache and clock conditions. ``total_ms`` spans the whole
    round for one example (plain pass, statistics pass and detector), so it
    is never below ``plain_forward_ms``.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if warmup < 0:
        raise ValueError("warmup can't be negative")
    kind = detector.vector_kind
    second = kind.needs_second_moment
    plain, extract, detect, total = [], [], [], []
    clock = time.perf_counter

    for i in range(warmup + repeats):
        x = images[i % len(images)][None]
        t0 = clock()
        forward(model, x)
        t1 = clock()
        _, means, sqmeans = per_example_stats(model, x, second)
        vec = vectors_from_moments(means, sqmeans, ref, kind)[0]
        t2 = clock()
        predict(detector, vec)
        t3 = clock()
        if i >= warmup:
            plain.append(t1 - t0)
            extract.append(t2 - t1)
            detect.append(t3 - t2)
            total.append(t3 - t0)

    train_s = time_detector_training(
        model, ref, detector, images if train_images is None else train_images)
    ms = lambda v: float(np.median(v) * 1e3)  # noqa: E731
    report = BenchReport(
        plain_forward_ms=ms(plain), nmd_extract_ms=ms(extract), detector_ms=ms(detect),
        total_ms=ms(total), detector_train_s=train_s,
        repeats=repeats, warmup=warmup,
    )
    log.info("benchmark done", plain_ms=round(report.plain_forward_ms, 4),
             extract_ms=round(report.nmd_extract_ms, 4),
             detector_ms=round(report.detector_ms, 4),
             ratio=round(report.overhead_ratio, 3))
    return report
