"""Command-line interface: ``nmdetect train|detect|experiment|bench``

Data sources are given either as a dataset config file (``key=value``, see
:class:`nmdetect.data.DatasetConfig`) or as ``synth`` (synthetic ID
textures) or ``synth:far`` / ``synth:near`` (synthetic OOD textures).

Any flag of a subcommand can also be set in a ``--config`` file, using the
flag name as the key; flags given on the command line win.
"""
import argparse
from contextlib import ExitStack
import logging
from pathlib import Path
import sys

import numpy as np
import pandas as pd
import structlog

from . import __version__
from .bench import run_bench, write_bench_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, read_config
from .data import (
    OOD_PRESETS, DataError, DatasetConfig, ImageDataset, Protocol, ProtocolSizes,
    SynthConfig, load_dataset, synth_pair,
)
from .detector import LrConfig, MlpConfig, load_detector, predict, save_detector
from .envelope import EnvelopeError
from .experiment import ExperimentConfig, run_experiment, write_experiment_reports
from .model import MissingBatchNormError, build_convnet4, evaluate_classifier
from .nmd import (
    VectorKind, avg_magnitude_scores, extract_vectors, load_reference,
    reference_from_bn, reference_from_dataset, save_reference,
)
from .streams import TRAIN, substream_int
from .tensor import NonFiniteError, ShapeError
from .train import TrainConfig, train_classifier

log = structlog.get_logger()

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

SYNTH = 'synth'
DETECT_CHUNK = 1024


def configure_logging(level='info'):
    """Send structlog output to stderr, keeping stdout for data"""
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt='%H:%M:%S'),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(level.upper())),
        logger_factory=structlog.PrintLoggerFactory(sys.stderr),
        cache_logger_on_first_use=False,
    )


# Data sources ---------------------------------------------------------------

def _synth(args, preset='far'):
    return synth_pair(SynthConfig(seed=args.data_seed, n=args.synth_n,
                                  ood_spec=OOD_PRESETS[preset]))


def load_source(source: str, args, norm=None) -> ImageDataset:
    """Load a data source named on the command line

    *norm* replaces the source's own normalization (OOD sets use the ID
    set's constants).
    """
    if source == SYNTH:
        ds = _synth(args)[0]
    elif source.startswith(SYNTH + ':'):
        preset = source.split(':', 1)[1]
        if preset not in OOD_PRESETS:
            raise ConfigError(
                f"Unknown synthetic preset {preset!r} ({', '.join(OOD_PRESETS)})")
        ds = _synth(args, preset)[1]
        ds.name = f'synth-{preset}'
    else:
        return load_dataset(DatasetConfig.from_mapping(read_config(source)), norm)
    return ds if norm is None else ds.with_normalization(norm)


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _reference(args, model):
    if args.refs:
        return load_reference(args.refs)
    return reference_from_bn(model)


# Commands -------------------------------------------------------------------

def cmd_train(args):
    _require(args, 'data', 'out')
    ds = load_source(args.data, args)
    model = build_convnet4(num_classes=int(ds.labels.max()) + 1, seed=args.seed,
                           width=args.width)
    config = TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                         batch_size=args.batch_size, settle_steps=args.settle_steps,
                         seed=substream_int(args.seed, TRAIN))
    result = train_classifier(model, ds.images, ds.labels, config)
    model = result.model
    log.info("trained", train_acc=evaluate_classifier(model, ds.images, ds.labels))

    out = Path(args.out)
    save_checkpoint(model, out)
    save_reference(reference_from_bn(model), args.refs or str(out) + '.refs')
    if args.traversal_refs:
        save_reference(reference_from_dataset(model, ds.images), args.traversal_refs)
    losses = pd.DataFrame({
        'epoch': np.arange(len(result.epoch_losses)),
        'loss': result.epoch_losses,
        'accuracy': result.epoch_accuracies,
    })
    losses.to_csv(args.losses or str(out) + '.losses.csv', index=False)
    log.info("checkpoint written", path=str(out))
    return EXIT_OK


def cmd_detect(args):
    _require(args, 'model', 'input')
    if args.batch_size < 1:
        raise ConfigError("--batch-size must be at least 1")
    model = load_checkpoint(args.model)
    ref = _reference(args, model)

    if args.score == 'detector':
        _require(args, 'detector')
        detector = load_detector(args.detector)
        kind = detector.vector_kind
        width = ref.num_channels * (2 if kind is VectorKind.nmd_concat_nvd else 1)
        if detector.dim != width:
            raise ShapeError(
                f"Detector expects {detector.dim}-dimensional vectors, the model "
                f"produces {width} ({kind.value})")
    else:
        detector = None
        kind = VectorKind(args.vector)

    ds = load_source(args.input, args)
    bs = args.batch_size
    n_groups = len(ds) // bs
    if n_groups == 0:
        raise DataError(f"Input has {len(ds)} examples, fewer than one batch of {bs}")

    chunk = max(1, DETECT_CHUNK // bs) * bs
    with ExitStack() as stack:
        out = stack.enter_context(open(args.out, 'w', newline='')) if args.out else sys.stdout
        try:
            for start in range(0, n_groups * bs, chunk):
                vecs = extract_vectors(model, ds.images[start:start + chunk], ref, kind,
                                       bs, workers=args.workers)
                scores = (avg_magnitude_scores(vecs) if detector is None
                          else predict(detector, vecs))
                first = start // bs + np.arange(len(vecs))
                pd.DataFrame({
                    'batch': first, 'first_example': first * bs,
                    'size': bs, 'score': scores,
                }).to_csv(out, header=(start == 0), index=False)
        except BaseException:
            if args.out:
                out.close()
                Path(args.out).unlink()
            raise
    log.info("scored", batches=n_groups, score=args.score)
    return EXIT_OK


def cmd_experiment(args):
    _require(args, 'model', 'id_data', 'ood_data', 'out_dir')
    protocol = Protocol(args.protocol)
    model = load_checkpoint(args.model)
    ref = _reference(args, model)
    id_ds = load_source(args.id_data, args)
    ood_ds = load_source(args.ood_data, args, norm=id_ds.norm)
    eval_oods = [load_source(s, args, norm=id_ds.norm) for s in args.eval_ood or ()]
    if protocol is Protocol.transfer and not eval_oods:
        raise ConfigError("The transfer protocol needs at least one --eval-ood")

    config = ExperimentConfig(
        protocol=protocol, vector=VectorKind(args.vector), detector=args.detector,
        batch_size=args.batch_size, seed=args.seed,
        sizes=ProtocolSizes(args.train_per_class, args.eval_per_class),
        lr=LrConfig(l2=args.l2, max_iter=args.max_iter, tol=args.tol),
        mlp=MlpConfig(hidden=args.hidden, dropout_p=args.dropout, lr=args.mlp_lr,
                      momentum=args.mlp_momentum, epochs=args.mlp_epochs),
        first_k=not args.no_first_k, workers=args.workers,
    )
    result = run_experiment(model, ref, id_ds, ood_ds, config, eval_oods)
    paths = write_experiment_reports(result, args.out_dir)
    if args.detector_out:
        save_detector(result.detector, args.detector_out)
    for name, report in result.reports.items():
        print(f"{name}\tAUROC {report.auroc:.4f}\tTNR95 {report.tnr95:.4f}"
              f"\tACC {report.acc:.4f}")
    log.info("reports written", files=len(paths), out_dir=str(args.out_dir))
    return EXIT_OK


def cmd_bench(args):
    _require(args, 'model', 'detector', 'input')
    if args.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    model = load_checkpoint(args.model)
    ref = _reference(args, model)
    detector = load_detector(args.detector)
    ds = load_source(args.input, args)
    images = ds.images
    if args.float32:
        model = model.astype(np.float32)
        images = images.astype(np.float32)
    report = run_bench(model, ref, detector, images, repeats=args.repeats,
                       warmup=args.warmup)
    write_bench_csv(report, args.out or sys.stdout)
    return EXIT_OK


# Argument parsing -----------------------------------------------------------

def _common(p, data_seed=0):
    p.add_argument('--config', help="key=value file with defaults for any flag")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--data-seed', type=int, default=data_seed,
                   help="seed for synthetic data sources")
    p.add_argument('--synth-n', type=int, default=2000,
                   help="examples per synthetic data source")
    p.add_argument('--refs', help="reference statistics file (default: BN buffers)")
    p.add_argument('--workers', type=int, default=1)


def build_parser():
    ap = argparse.ArgumentParser(prog='nmdetect', description=__doc__.splitlines()[0])
    ap.add_argument('--version', action='version', version=__version__)
    ap.add_argument('--log-level', default='info',
                    choices=['debug', 'info', 'warning', 'error'])
    sub = ap.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help="train the ConvNet classifier")
    _common(p)
    p.add_argument('--data', help="training data source")
    p.add_argument('--epochs', type=int, default=10)
    p.add_argument('--lr', type=float, default=0.01)
    p.add_argument('--momentum', type=float, default=0.9)
    p.add_argument('--batch-size', type=int, default=64)
    p.add_argument('--settle-steps', type=int, default=300,
                   help="weight-frozen passes that settle BN statistics after training")
    p.add_argument('--width', type=int, default=300)
    p.add_argument('--out', help="checkpoint path")
    p.add_argument('--losses', help="loss CSV path (default: OUT.losses.csv)")
    p.add_argument('--traversal-refs',
                   help="also write exact dataset-traversal statistics here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('detect', help="score inputs as OOD")
    _common(p)
    p.add_argument('--model')
    p.add_argument('--detector')
    p.add_argument('--input')
    p.add_argument('--batch-size', type=int, default=1)
    p.add_argument('--score', choices=['detector', 'avg-magnitude'], default='detector')
    p.add_argument('--vector', choices=[k.value for k in VectorKind], default='nmd',
                   help="vector kind for --score avg-magnitude")
    p.add_argument('--out', help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('experiment', help="run a detection protocol end to end")
    _common(p, data_seed=1)
    p.add_argument('--model')
    p.add_argument('--id-data')
    p.add_argument('--ood-data')
    p.add_argument('--eval-ood', action='append',
                   help="unseen OOD source for the transfer protocol (repeatable)")
    p.add_argument('--protocol', choices=[p.value for p in Protocol], default='full')
    p.add_argument('--vector', choices=[k.value for k in VectorKind], default='nmd')
    p.add_argument('--detector', choices=['lr', 'mlp'], default='lr')
    p.add_argument('--batch-size', type=int, default=1)
    p.add_argument('--train-per-class', type=int, default=500)
    p.add_argument('--eval-per-class', type=int, default=None)
    p.add_argument('--l2', type=float, default=1.0)
    p.add_argument('--max-iter', type=int, default=1000)
    p.add_argument('--tol', type=float, default=1e-6)
    p.add_argument('--hidden', type=int, default=128)
    p.add_argument('--dropout', type=float, default=0.5)
    p.add_argument('--mlp-lr', type=float, default=0.001)
    p.add_argument('--mlp-momentum', type=float, default=0.9)
    p.add_argument('--mlp-epochs', type=int, default=100)
    p.add_argument('--no-first-k', action='store_true')
    p.add_argument('--out-dir')
    p.add_argument('--detector-out', help="save the trained detector here")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser('bench', help="measure single-example latency")
    _common(p)
    p.add_argument('--model')
    p.add_argument('--detector')
    p.add_argument('--input')
    p.add_argument('--repeats', type=int, default=1000)
    p.add_argument('--warmup', type=int, default=20)
    p.add_argument('--float32', action='store_true')
    p.add_argument('--out', help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    return ap, sub.choices


def _config_defaults(subparser, kv):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in kv.items():
        dest = key.replace('-', '_')
        action = actions.get(dest)
        if action is None or dest in ('help', 'config'):
            raise ConfigError(f"Unknown option in config file: {key}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ConfigError(f"{key}: expected true or false, got {value!r}")
            defaults[dest] = value.lower() in ('true', '1', 'yes')
        elif isinstance(action, argparse._AppendAction):
            defaults[dest] = [v.strip() for v in value.split(',') if v.strip()]
        else:
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{key}: {value!r} is not one of {list(action.choices)}")
            defaults[dest] = value  # argparse applies type= to string defaults
    return defaults


def parse_args(argv=None):
    ap, subparsers = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, 'config', None):
        sub = subparsers[args.command]
        sub.set_defaults(**_config_defaults(sub, read_config(args.config)))
        args = ap.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except ConfigError as e:
        print(f"nmdetect: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"nmdetect: error: can't read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level)

    try:
        return args.func(args)
    except NonFiniteError as e:
        code, msg = EXIT_NUMERICAL, e
    except ConfigError as e:
        code, msg = EXIT_USAGE, e
    except (DataError, EnvelopeError, ShapeError, MissingBatchNormError, OSError) as e:
        code, msg = EXIT_DATA, e
    except ValueError as e:
        code, msg = EXIT_USAGE, e
    print(f"nmdetect {args.command}: error: {msg}", file=sys.stderr)
    return code
