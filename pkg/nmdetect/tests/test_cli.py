import io

import numpy as np
import pandas as pd
import pytest

from nmdetect import cli
from nmdetect.checkpoint import load_checkpoint
from nmdetect.data import write_raw_u8
from nmdetect.detector import fit_lr, load_detector, save_detector
from nmdetect.metrics import read_report_csv
from nmdetect.nmd import ReferenceSource, VectorKind, load_reference
from nmdetect.tensor import NonFiniteError

SYNTH = ['--synth-n', '96']


@pytest.fixture(scope='module')
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp('cli')
    rc = cli.main(['train', '--data', 'synth', *SYNTH, '--epochs', '1', '--width', '8',
                   '--batch-size', '16', '--out', str(d / 'model.nmdk'),
                   '--traversal-refs', str(d / 'exact.refs')])
    assert rc == 0
    rc = cli.main(['experiment', '--model', str(d / 'model.nmdk'),
                   '--id-data', 'synth', '--ood-data', 'synth:far', *SYNTH,
                   '--train-per-class', '30', '--eval-per-class', '30',
                   '--vector', 'concat', '--out-dir', str(d / 'reports'),
                   '--detector-out', str(d / 'det.nmdk')])
    assert rc == 0
    return d


def test_train_outputs(workdir):
    model = load_checkpoint(workdir / 'model.nmdk')
    assert model.num_classes == 4
    assert model.num_channels == 32

    bn_refs = load_reference(str(workdir / 'model.nmdk') + '.refs')
    assert bn_refs.source is ReferenceSource.bn_free_lunch
    exact = load_reference(workdir / 'exact.refs')
    assert exact.source is ReferenceSource.dataset_traversal
    assert exact.sample_count == 96

    losses = pd.read_csv(str(workdir / 'model.nmdk') + '.losses.csv')
    assert list(losses.columns) == ['epoch', 'loss', 'accuracy']
    assert len(losses) == 1


def test_experiment_outputs(workdir):
    report = read_report_csv(workdir / 'reports' / 'report-synth-far.csv')
    assert 0 <= report['auroc'] <= 1
    assert report['n_pos'] == 30
    assert (workdir / 'reports' / 'layer-importance.csv').exists()
    assert len(pd.read_csv(workdir / 'reports' / 'first-k.csv')) == 4

    det = load_detector(workdir / 'det.nmdk')
    assert det.vector_kind is VectorKind.nmd_concat_nvd
    # Concatenated NMD and NVD: twice the channel count
    assert det.dim == 64


def test_experiment_prints_summary(workdir, capsys):
    rc = cli.main(['experiment', '--model', str(workdir / 'model.nmdk'),
                   '--id-data', 'synth', '--ood-data', 'synth:far', *SYNTH,
                   '--protocol', 'zero-shot', '--train-per-class', '20',
                   '--eval-per-class', '20', '--no-first-k',
                   '--out-dir', str(workdir / 'zero')])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith('synth-far\tAUROC ')
    assert 'TNR95' in out and 'ACC' in out
    assert not (workdir / 'zero' / 'first-k.csv').exists()


def test_detect_with_detector(workdir):
    out = workdir / 'scores.csv'
    rc = cli.main(['detect', '--model', str(workdir / 'model.nmdk'),
                   '--detector', str(workdir / 'det.nmdk'), '--input', 'synth:far',
                   '--synth-n', '11', '--batch-size', '2', '--out', str(out)])
    assert rc == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ['batch', 'first_example', 'size', 'score']
    assert list(df['batch']) == [0, 1, 2, 3, 4]
    assert list(df['first_example']) == [0, 2, 4, 6, 8]
    assert ((df['score'] >= 0) & (df['score'] <= 1)).all()


def test_detect_avg_magnitude(workdir, capsys):
    rc = cli.main(['detect', '--model', str(workdir / 'model.nmdk'), '--input', 'synth',
                   '--synth-n', '8', '--score', 'avg-magnitude',
                   '--refs', str(workdir / 'exact.refs')])
    assert rc == 0
    df = pd.read_csv(io.StringIO(capsys.readouterr().out))
    assert len(df) == 8
    assert (df['score'] >= 0).all()


def test_detect_dimension_mismatch(workdir, capsys):
    rng = np.random.default_rng(0)
    det = fit_lr(rng.standard_normal((10, 5)), np.arange(10) % 2)
    save_detector(det, workdir / 'wrong.nmdk')
    out = workdir / 'wrong.csv'
    rc = cli.main(['detect', '--model', str(workdir / 'model.nmdk'),
                   '--detector', str(workdir / 'wrong.nmdk'), '--input', 'synth',
                   '--synth-n', '4', '--out', str(out)])
    assert rc == cli.EXIT_DATA
    assert 'expects 5-dimensional' in capsys.readouterr().err
    assert not out.exists()


def test_bench(workdir):
    out = workdir / 'bench.csv'
    rc = cli.main(['bench', '--model', str(workdir / 'model.nmdk'),
                   '--detector', str(workdir / 'det.nmdk'), '--input', 'synth',
                   '--synth-n', '8', '--repeats', '3', '--warmup', '1', '--out', str(out)])
    assert rc == 0
    df = pd.read_csv(out)
    assert df['repeats'][0] == 3
    assert df['plain_forward_ms'][0] > 0


def test_bench_float32(workdir, capsys):
    rc = cli.main(['bench', '--model', str(workdir / 'model.nmdk'),
                   '--detector', str(workdir / 'det.nmdk'), '--input', 'synth',
                   '--synth-n', '8', '--repeats', '2', '--warmup', '0', '--float32'])
    assert rc == 0
    assert 'nmd_extract_ms' in capsys.readouterr().out


def test_bench_repeats_checked(workdir, capsys):
    rc = cli.main(['bench', '--model', str(workdir / 'model.nmdk'),
                   '--detector', str(workdir / 'det.nmdk'), '--input', 'synth',
                   '--repeats', '0'])
    assert rc == cli.EXIT_USAGE
    assert '--repeats' in capsys.readouterr().err


def test_few_shot_needs_25(workdir, capsys):
    rc = cli.main(['experiment', '--model', str(workdir / 'model.nmdk'),
                   '--id-data', 'synth', '--ood-data', 'synth:far', '--synth-n', '20',
                   '--protocol', 'few-shot', '--out-dir', str(workdir / 'few')])
    assert rc == cli.EXIT_DATA
    assert '25 required' in capsys.readouterr().err


def test_transfer_needs_eval_ood(workdir, capsys):
    rc = cli.main(['experiment', '--model', str(workdir / 'model.nmdk'),
                   '--id-data', 'synth', '--ood-data', 'synth:near', *SYNTH,
                   '--protocol', 'transfer', '--out-dir', str(workdir / 'tr')])
    assert rc == cli.EXIT_USAGE
    assert '--eval-ood' in capsys.readouterr().err


def test_missing_and_corrupt_files(workdir, capsys):
    rc = cli.main(['detect', '--model', str(workdir / 'nope.nmdk'), '--input', 'synth',
                   '--score', 'avg-magnitude'])
    assert rc == cli.EXIT_DATA

    bad = workdir / 'bad.nmdk'
    bad.write_bytes(b'NOPE' + bytes(20))
    rc = cli.main(['detect', '--model', str(bad), '--input', 'synth',
                   '--score', 'avg-magnitude'])
    assert rc == cli.EXIT_DATA
    assert 'bad magic' in capsys.readouterr().err

    garbled = bytearray((workdir / 'model.nmdk').read_bytes())
    garbled[garbled.index(b'fc.weights')] = 0xff
    bad.write_bytes(bytes(garbled))
    rc = cli.main(['detect', '--model', str(bad), '--input', 'synth',
                   '--score', 'avg-magnitude'])
    assert rc == cli.EXIT_DATA
    assert 'UTF-8' in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main(['detect', '--input', 'synth']) == cli.EXIT_USAGE
    assert '--model is required' in capsys.readouterr().err
    assert cli.main(['train', '--data', 'synth:plaid', '--out', 'x']) == cli.EXIT_USAGE
    with pytest.raises(SystemExit):
        cli.main(['experiment', '--protocol', 'sideways'])


def test_numerical_error_exit_code(monkeypatch, tmp_path):
    def explode(*args, **kwargs):
        raise NonFiniteError("classifier loss", "epoch 0")

    monkeypatch.setattr(cli, 'train_classifier', explode)
    rc = cli.main(['train', '--data', 'synth', '--synth-n', '8', '--width', '4',
                   '--out', str(tmp_path / 'm')])
    assert rc == cli.EXIT_NUMERICAL


def test_config_file(tmp_path):
    cfg = tmp_path / 'exp.cfg'
    cfg.write_text('# experiment defaults\nprotocol=few-shot\nl2=0.5\nno-first-k=true\n'
                   'eval-ood=synth:far,synth:near\n')
    args = cli.parse_args(['experiment', '--config', str(cfg)])
    assert args.protocol == 'few-shot'
    assert args.l2 == 0.5
    assert args.no_first_k is True
    assert args.eval_ood == ['synth:far', 'synth:near']

    # The command line wins
    args = cli.parse_args(['experiment', '--config', str(cfg), '--l2', '2'])
    assert args.l2 == 2.0


def test_config_file_errors(tmp_path, capsys):
    cfg = tmp_path / 'bad.cfg'
    cfg.write_text('colour=blue\n')
    assert cli.main(['experiment', '--config', str(cfg)]) == cli.EXIT_USAGE
    assert 'colour' in capsys.readouterr().err
    assert cli.main(['experiment', '--config', str(tmp_path / 'missing.cfg')]) \
        == cli.EXIT_USAGE


def test_dataset_config_source(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (6, 3, 32, 32), dtype=np.uint8)
    write_raw_u8(tmp_path / 'x.u8', images, np.arange(6) % 2)
    (tmp_path / 'x.cfg').write_text(f'name=tiny\npath={tmp_path / "x.u8"}\n'
                                    'format=raw\nn=6\n')
    rc = cli.main(['train', '--data', str(tmp_path / 'x.cfg'), '--epochs', '1',
                   '--width', '4', '--batch-size', '3', '--out', str(tmp_path / 'm')])
    assert rc == 0
    assert load_checkpoint(tmp_path / 'm').num_classes == 2
