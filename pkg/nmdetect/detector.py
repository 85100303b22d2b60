"""Lightweight OOD detectors trained on discrepancy vectors.

Labels follow one convention throughout: 0 for in-distribution, 1 for OOD.
Both detectors standardize their input with statistics of the training
vectors, and output the probability of OOD.
"""
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog
from scipy.special import expit

from .envelope import Envelope, EnvelopeError, FileKind
from .layers import FcLayerParams, fc_backward, fc_forward, relu, relu_backward
from .metrics import ScoredSet, auroc
from .nmd import NmdVector, VectorKind
from .tensor import NonFiniteError, ShapeError, check_finite

log = structlog.get_logger()

__all__ = [
    'Standardizer',
    'fit_standardizer',
    'LrConfig',
    'LrDetector',
    'lr_objective',
    'train_lr',
    'fit_lr',
    'MlpConfig',
    'MlpDetector',
    'init_mlp',
    'mlp_loss_and_grads',
    'train_mlp',
    'fit_mlp',
    'predict',
    'LayerImportance',
    'layer_importance',
    'write_importance_csv',
    'FirstKResult',
    'first_k_layers_eval',
    'save_detector',
    'load_detector',
]

STD_FLOOR = 1e-8
TAG_DETR = b'DETR'


# Standardizer ---------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)

    def apply(self, v):
        v = np.asarray(v)
        if v.shape[-1] != self.dim:
            raise ShapeError(
                f"Standardizer fitted on {self.dim} dimensions, got {v.shape[-1]}")
        return (v - self.mean) / self.std


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors)
    rows = [v.values if isinstance(v, NmdVector) else np.asarray(v) for v in vectors]
    if not rows:
        return np.empty((0, 0))
    return np.stack(rows)


def fit_standardizer(vectors) -> Standardizer:
    """Per-dimension mean and standard deviation of the fitting vectors

    Dimensions with (near) zero spread get a standard deviation of 1, so
    they standardize to 0 instead of blowing up.
    """
    x = _as_matrix(vectors)
    if len(x) < 2:
        raise ValueError(f"Need at least 2 vectors to fit a standardizer, got {len(x)}")
    std = x.std(axis=0)
    std[std < STD_FLOOR] = 1.0
    return Standardizer(x.mean(axis=0), std)


def _split_pairs(pairs):
    vectors, labels = zip(*pairs) if pairs else ((), ())
    kinds = {v.kind for v in vectors if isinstance(v, NmdVector)}
    kind = kinds.pop() if len(kinds) == 1 else VectorKind.nmd
    return _as_matrix(vectors), np.asarray(labels), kind


def _check_labels(y, n):
    y = np.asarray(y)
    if len(y) != n:
        raise ShapeError(f"{n} vectors but {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("Detector labels must be 0 (ID) or 1 (OOD)")
    if len(np.unique(y)) < 2:
        raise ValueError("Detector training needs both ID (0) and OOD (1) examples")
    return y.astype(np.float64)


# Logistic regression --------------------------------------------------------

@dataclass(frozen=True)
class LrConfig:
    l2: float = 1.0
    max_iter: int = 1000
    tol: float = 1e-6
    # Gradient descent from zero is deterministic; kept so every detector
    # config carries a seed.
    seed: int = 0

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError("L2 strength can't be negative")
        if self.max_iter < 0:
            raise ValueError("max_iter can't be negative")
        if self.tol <= 0:
            raise ValueError("Tolerance must be positive")


@dataclass
class LrDetector:
    weights: np.ndarray
    bias: float
    standardizer: Standardizer
    vector_kind: VectorKind = VectorKind.nmd
    loss_history: List[float] = field(default_factory=list, repr=False)
    converged: bool = False

    kind = 'lr'

    @property
    def dim(self) -> int:
        return len(self.weights)

    @property
    def num_parameters(self) -> int:
        return self.dim + 1

    def decision(self, x_std):
        return x_std @ self.weights + self.bias


def lr_objective(w, b, x, y, l2):
    """Regularized mean log loss and its gradient

    ``(1/N) * (sum of log losses + l2/2 * |w|^2)``, bias not regularized.
    Returns (loss, grad_w, grad_b).
    """
    n = len(y)
    z = x @ w + b
    loss = (np.logaddexp(0.0, z) - y * z).sum() + 0.5 * l2 * (w @ w)
    resid = expit(z) - y
    gw = (x.T @ resid + l2 * w) / n
    gb = resid.sum() / n
    return float(loss / n), gw, float(gb)


def _lr_descent(x, y, config: LrConfig):
    w = np.zeros(x.shape[1])
    b = 0.0
    step = 1.0
    loss, gw, gb = lr_objective(w, b, x, y, config.l2)
    history = [loss]
    converged = False
    for _ in range(config.max_iter):
        gnorm2 = gw @ gw + gb * gb
        if np.sqrt(gnorm2) <= config.tol:
            converged = True
            break
        # Backtracking (Armijo) line search; start from twice the last step
        step *= 2.0
        while True:
            w_new = w - step * gw
            b_new = b - step * gb
            new = lr_objective(w_new, b_new, x, y, config.l2)
            if new[0] <= loss - 0.5 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-20:
                log.warning("line search stalled", loss=loss)
                return w, b, history, False
        w, b = w_new, b_new
        loss, gw, gb = new
        if not np.isfinite(loss):
            raise NonFiniteError("logistic regression loss", f"after {len(history)} steps")
        history.append(loss)
    else:
        converged = np.sqrt(gw @ gw + gb * gb) <= config.tol
    return w, b, history, bool(converged)


def fit_lr(x, y, config: LrConfig = LrConfig(),
           vector_kind: VectorKind = VectorKind.nmd) -> LrDetector:
    """Fit a standardizer and an L2-regularized LR on a matrix of vectors"""
    x = check_finite(np.asarray(x, dtype=np.float64), "detector inputs")
    y = _check_labels(y, len(x))
    std = fit_standardizer(x)
    w, b, history, converged = _lr_descent(std.apply(x), y, config)
    det = LrDetector(w, b, std, vector_kind, history, converged)
    log.info("detector trained", detector='lr', params=det.num_parameters,
             iterations=len(history) - 1, loss=round(history[-1], 6),
             converged=converged)
    return det


def train_lr(pairs, config: LrConfig = LrConfig()) -> LrDetector:
    """Train LR on ``(vector, label)`` pairs"""
    x, y, kind = _split_pairs(pairs)
    return fit_lr(x, y, config, kind)


# MLP ------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 128
    dropout_p: float = 0.5
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("Hidden width must be at least 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"Dropout probability must be in [0, 1), not {self.dropout_p}")
        if self.lr <= 0:
            raise ValueError("Learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("Momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("Epoch count can't be negative")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")


@dataclass
class MlpDetector:
    """D -> h -> h -> 1 with ReLU, dropout after the second layer"""
    layers: List[FcLayerParams]
    standardizer: Standardizer
    config: MlpConfig = MlpConfig()
    vector_kind: VectorKind = VectorKind.nmd
    epoch_losses: List[float] = field(default_factory=list, repr=False)

    kind = 'mlp'

    @property
    def dim(self) -> int:
        return self.layers[0].in_features

    @property
    def num_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def decision(self, x_std):
        logits, _ = _mlp_forward(self.layers, x_std)
        return logits


def _uniform_fc(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return FcLayerParams(rng.uniform(-bound, bound, (fan_out, fan_in)),
                         rng.uniform(-bound, bound, fan_out))


def init_mlp(dim: int, hidden: int, rng) -> List[FcLayerParams]:
    return [_uniform_fc(rng, dim, hidden), _uniform_fc(rng, hidden, hidden),
            _uniform_fc(rng, hidden, 1)]


class _MlpCache(NamedTuple):
    x: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    mask: Optional[np.ndarray]
    a2: np.ndarray


def _mlp_forward(layers, x, rng=None, dropout_p=0.0):
    """Logits [B]; dropout only when an *rng* is given"""
    h1 = fc_forward(x, layers[0])
    a1 = relu(h1)
    h2 = fc_forward(a1, layers[1])
    a2 = relu(h2)
    mask = None
    if rng is not None and dropout_p > 0:
        mask = (rng.random(a2.shape) >= dropout_p) / (1.0 - dropout_p)
        a2 = a2 * mask
    logits = fc_forward(a2, layers[2])[:, 0]
    return logits, _MlpCache(x, h1, a1, h2, mask, a2)


def mlp_loss_and_grads(layers, x, y, rng=None, dropout_p=0.0):
    """Mean binary cross-entropy and gradients as ``[(dW, db), ...]``"""
    logits, c = _mlp_forward(layers, x, rng, dropout_p)
    n = len(y)
    loss = float((np.logaddexp(0.0, logits) - y * logits).mean())
    dz = ((expit(logits) - y) / n)[:, None]

    da2, dw3, db3 = fc_backward(dz, c.a2, layers[2])
    if c.mask is not None:
        da2 = da2 * c.mask
    da1, dw2, db2 = fc_backward(relu_backward(da2, c.h2), c.a1, layers[1])
    _, dw1, db1 = fc_backward(relu_backward(da1, c.h1), c.x, layers[0])
    return loss, [(dw1, db1), (dw2, db2), (dw3, db3)]


def fit_mlp(x, y, config: MlpConfig = MlpConfig(),
            vector_kind: VectorKind = VectorKind.nmd) -> MlpDetector:
    """Minibatch SGD with momentum on binary cross-entropy"""
    x = check_finite(np.asarray(x, dtype=np.float64), "detector inputs")
    y = _check_labels(y, len(x))
    std = fit_standardizer(x)
    xs = std.apply(x)
    rng = np.random.default_rng(config.seed)
    layers = init_mlp(x.shape[1], config.hidden, rng)
    velocity = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers]
    det = MlpDetector(layers, std, config, vector_kind)

    n = len(xs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = mlp_loss_and_grads(layers, xs[idx], y[idx], rng,
                                             config.dropout_p)
            if not np.isfinite(loss):
                raise NonFiniteError("MLP detector loss", f"epoch {epoch}")
            for layer, (vw, vb), (gw, gb) in zip(layers, velocity, grads):
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                layer.weights = layer.weights - config.lr * vw
                layer.bias = layer.bias - config.lr * vb
            total += loss * len(idx)
        det.epoch_losses.append(total / n)

    log.info("detector trained", detector='mlp', params=det.num_parameters,
             epochs=config.epochs,
             loss=round(det.epoch_losses[-1], 6) if det.epoch_losses else None)
    return det


def train_mlp(pairs, config: MlpConfig = MlpConfig()) -> MlpDetector:
    x, y, kind = _split_pairs(pairs)
    return fit_mlp(x, y, config, kind)


Detector = Union[LrDetector, MlpDetector]


def predict(detector: Detector, nmd):
    """Probability of OOD for one vector (float) or a matrix of them (array)"""
    values = nmd.values if isinstance(nmd, NmdVector) else np.asarray(nmd, dtype=np.float64)
    single = values.ndim == 1
    x = np.atleast_2d(values)
    if x.shape[1] != detector.dim:
        raise ShapeError(
            f"Detector expects {detector.dim}-dimensional vectors, got {x.shape[1]}")
    p = expit(detector.decision(detector.standardizer.apply(x)))
    return float(p[0]) if single else p


# Layer importance -----------------------------------------------------------

@dataclass
class LayerImportance:
    layers: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray


def _dimension_layers(channel_index) -> np.ndarray:
    channel_index = np.asarray(channel_index)
    return channel_index[:, 0] if channel_index.ndim == 2 else channel_index


def layer_importance(lr: LrDetector, channel_index) -> LayerImportance:
    """Mean |coefficient| per layer, plus a version summing to 1

    *channel_index* gives the layer of every input dimension, either as a
    ``[D, 2]`` (layer, channel) table or a flat array of layer numbers.
    """
    layer_of = _dimension_layers(channel_index)
    if len(layer_of) != lr.dim:
        raise ShapeError(f"{len(layer_of)} channel entries for a {lr.dim}-dim detector")
    layers = np.unique(layer_of)
    mags = np.abs(lr.weights)
    raw = np.array([mags[layer_of == l].mean() for l in layers])
    total = raw.sum()
    if total > 0:
        normalized = raw / total
    else:
        normalized = np.full(len(raw), 1.0 / len(raw))
    return LayerImportance(layers, raw, normalized)


def write_importance_csv(imp: LayerImportance, path=None):
    df = pd.DataFrame({'layer': imp.layers, 'raw_importance': imp.raw,
                       'normalized_importance': imp.normalized})
    return df.to_csv(path, index=False)


# First-k layers ablation ----------------------------------------------------

class FirstKResult(NamedTuple):
    k: int
    dim: int
    auroc: float


def first_k_layers_eval(train_x, train_y, eval_x, eval_y, channel_index,
                        fit: Callable[..., Detector] = fit_lr,
                        ks: Optional[Sequence[int]] = None) -> List[FirstKResult]:
    """Retrain on the dimensions of layers ``0..k-1`` for each k

    *fit* is called as ``fit(x, y)`` and must return a detector. By default
    every k from 1 to the number of layers is evaluated.
    """
    layer_of = _dimension_layers(channel_index)
    n_layers = int(layer_of.max()) + 1
    if ks is None:
        ks = range(1, n_layers + 1)
    results = []
    for k in ks:
        if not 1 <= k <= n_layers:
            raise ValueError(f"k must be between 1 and {n_layers}, not {k}")
        cols = layer_of < k
        det = fit(train_x[:, cols], train_y)
        scores = predict(det, eval_x[:, cols])
        results.append(FirstKResult(k, int(cols.sum()),
                                    auroc(ScoredSet(scores, eval_y))))
        log.info("first-k evaluated", k=k, dim=int(cols.sum()), auroc=results[-1].auroc)
    return results


# Files ----------------------------------------------------------------------

_detector_codes = {'lr': 1, 'mlp': 2}
_vector_codes = {VectorKind.nmd: 1, VectorKind.nvd: 2, VectorKind.nmd_concat_nvd: 3}


def save_detector(det: Detector, path):
    env = Envelope(FileKind.detector)
    env.add(TAG_DETR, 'info', np.array([_detector_codes[det.kind],
                                        _vector_codes[det.vector_kind]]))
    env.add(TAG_DETR, 'standardizer.mean', det.standardizer.mean)
    env.add(TAG_DETR, 'standardizer.std', det.standardizer.std)
    if isinstance(det, LrDetector):
        env.add(TAG_DETR, 'lr.weights', det.weights)
        env.add(TAG_DETR, 'lr.bias', np.array([det.bias]))
    else:
        c = det.config
        env.add(TAG_DETR, 'mlp.hyper',
                np.array([c.hidden, c.dropout_p, c.lr, c.momentum], dtype=np.float64))
        for i, layer in enumerate(det.layers):
            env.add(TAG_DETR, f'mlp.fc{i}.weights', layer.weights)
            env.add(TAG_DETR, f'mlp.fc{i}.bias', layer.bias)
    env.write(path)


def load_detector(path) -> Detector:
    env = Envelope.read(path, FileKind.detector)
    try:
        det_code, vec_code = (int(v) for v in env['info'])
        vector_kind = {v: k for k, v in _vector_codes.items()}[vec_code]
        std = Standardizer(env['standardizer.mean'], env['standardizer.std'])
        if det_code == _detector_codes['lr']:
            return LrDetector(env['lr.weights'], float(env['lr.bias'][0]), std,
                              vector_kind, converged=True)
        elif det_code == _detector_codes['mlp']:
            hidden, dropout_p, lr, momentum = env['mlp.hyper']
            config = MlpConfig(hidden=int(hidden), dropout_p=float(dropout_p),
                               lr=float(lr), momentum=float(momentum))
            layers = [FcLayerParams(env[f'mlp.fc{i}.weights'], env[f'mlp.fc{i}.bias'])
                      for i in range(3)]
            return MlpDetector(layers, std, config, vector_kind)
    except KeyError as e:
        raise EnvelopeError(f"detector file is missing record {e}") from None
    raise EnvelopeError(f"unknown detector type code {det_code}")
