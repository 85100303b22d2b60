"""ROC-based evaluation of OOD scores.

OOD is the positive class (label 1). All three metrics depend only on the
ordering of the scores.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

__all__ = [
    'ScoredSet',
    'EvalReport',
    'auroc',
    'roc_curve',
    'tnr_at_tpr95',
    'detection_accuracy',
    'evaluate',
    'write_report_csv',
    'read_report_csv',
    'write_roc_csv',
]

TPR_LEVEL = 0.95


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if len(self.scores) != len(self.labels):
            raise ValueError(
                f"{len(self.scores)} scores but {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("Labels must be 0 (ID) or 1 (OOD)")
        self.labels = self.labels.astype(np.int64)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self.labels) - self.n_pos

    def check_both_classes(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise ValueError(
                "Both ID and OOD examples are needed "
                f"(got {self.n_neg} ID, {self.n_pos} OOD)")


@dataclass
class EvalReport:
    auroc: float
    tnr95: float
    acc: float
    roc_points: np.ndarray  # [n, 2] of (fpr, tpr)
    n_pos: int
    n_neg: int

    def as_dict(self):
        return {'auroc': self.auroc, 'tnr95': self.tnr95, 'acc': self.acc,
                'n_pos': self.n_pos, 'n_neg': self.n_neg}


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 P(tie)"""
    s.check_both_classes()
    ranks = rankdata(s.scores)  # ties get the average rank
    n_pos, n_neg = s.n_pos, s.n_neg
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _step_counts(s: ScoredSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) for 'score >= t' at each distinct t, descending"""
    order = np.argsort(-s.scores, kind='stable')
    scores = s.scores[order]
    labels = s.labels[order]
    tps = np.cumsum(labels)
    fps = np.cumsum(1 - labels)
    # Last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    return tps[last], fps[last], scores[last]


def roc_curve(s: ScoredSet) -> np.ndarray:
    """ROC step points from (0, 0) to (1, 1), one per distinct threshold"""
    s.check_both_classes()
    tps, fps, _ = _step_counts(s)
    fpr = np.r_[0, fps / s.n_neg]
    tpr = np.r_[0, tps / s.n_pos]
    return np.column_stack([fpr, tpr])


def tnr_at_tpr95(s: ScoredSet, level=TPR_LEVEL) -> float:
    """TNR at the first threshold (scanning downwards) where TPR >= level

    No interpolation between ROC steps.
    """
    s.check_both_classes()
    tps, fps, _ = _step_counts(s)
    reached = np.nonzero(tps / s.n_pos >= level)[0]
    fp = fps[reached[0]]
    return float((s.n_neg - fp) / s.n_neg)


def detection_accuracy(s: ScoredSet) -> float:
    """Best accuracy over every threshold

    Candidate thresholds are the midpoints between consecutive distinct
    scores plus +/- infinity, predicting OOD above the threshold.
    """
    s.check_both_classes()
    tps, fps, _ = _step_counts(s)
    n_neg = s.n_neg
    correct = max(n_neg, int((tps + n_neg - fps).max()))
    return float(correct / len(s.labels))


def evaluate(s: ScoredSet) -> EvalReport:
    return EvalReport(
        auroc=auroc(s), tnr95=tnr_at_tpr95(s), acc=detection_accuracy(s),
        roc_points=roc_curve(s), n_pos=s.n_pos, n_neg=s.n_neg,
    )


def write_report_csv(report: EvalReport, path=None):
    df = pd.DataFrame(list(report.as_dict().items()), columns=['metric', 'value'])
    return df.to_csv(path, index=False)


def read_report_csv(path) -> dict:
    df = pd.read_csv(path)
    return dict(zip(df['metric'], df['value']))


def write_roc_csv(report: EvalReport, path=None):
    df = pd.DataFrame(report.roc_points, columns=['fpr', 'tpr'])
    return df.to_csv(path, index=False)
