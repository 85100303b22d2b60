"""Out-of-distribution detection from neural mean discrepancies.
"""
from .data import (
    DataError, ImageDataset, Protocol, ProtocolError, ProtocolSizes, SynthConfig,
    TextureSpec, block_permute, load_cifar_binary, load_raw_u8, make_protocol_split,
    synth_pair,
)
from .detector import (
    LrConfig, LrDetector, MlpConfig, MlpDetector, Standardizer, fit_standardizer,
    layer_importance, first_k_layers_eval, predict, train_lr, train_mlp,
)
from .metrics import (
    EvalReport, ScoredSet, auroc, detection_accuracy, roc_curve, tnr_at_tpr95,
)
from .model import (
    ActivationStats, ConvNetModel, MissingBatchNormError, build_convnet,
    build_convnet4, forward_with_stats,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .nmd import (
    NmdVector, ReferenceStats, VectorKind, avg_magnitude_score, compute_nmd,
    compute_nvd, concat_nmd_nvd, reference_from_bn, reference_from_dataset,
)
from .tensor import NonFiniteError, ShapeError
from .train import TrainConfig, train_classifier

__version__ = '0.1.0'
