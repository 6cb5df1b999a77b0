"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os
import json

import numpy as np
import pytest
from click.testing import CliRunner

from gridclip.cli import gridclip
from gridclip.config import load_config
from gridclip.data import read_manifest
from gridclip.evaluation import AP_CURVE_FILE, HISTOGRAM_FILE, RC_FILE, EvalReport, read_histogram_csv, read_rc_csv
from gridclip.textbank import bank_from_manifest, load_bank
from gridclip.training import LossTrace
from gridclip.utils import project_path


def invoke(*args):
    result = CliRunner().invoke(gridclip, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture
def corpus_dir(testdir):
    path = os.path.join(testdir, 'corpus')
    invoke('gen-data', '--seed', 0, '--categories', 12, '--images', 600, '--size', 64, '--out', path)
    return path


def test_gen_data(corpus_dir):
    """
    Test that gen-data writes a corpus whose manifest matches its flags.
    """
    manifest = read_manifest(corpus_dir)
    assert len(manifest.categories) == 12
    assert manifest.counts == {'train': 480, 'val': 120}
    assert tuple(manifest.image_size) == (64, 64)


def test_bank_command(testdir, corpus_dir):
    out = os.path.join(testdir, 'novel.bin')
    invoke('bank', '--data', corpus_dir, '--out', out, '--split', 'novel', '--dim', 16)
    bank = load_bank(out)
    assert bank.dim == 16
    assert bank.names == read_manifest(corpus_dir).names_in('novel')


def test_bank_from_config(testdir, corpus_dir):
    """
    Test that a bank built with --config matches the one training builds from
    the same config.
    """
    path = project_path('configs/desk.yaml')
    out = os.path.join(testdir, 'base.bin')
    invoke('bank', '--config', path, '--data', corpus_dir, '--out', out, '--split', 'base')
    config = load_config(path)
    manifest = read_manifest(corpus_dir)
    expected = bank_from_manifest(manifest, config.templates, config.seed, config.embed_dim, config.text_mode,
                                  split='base')
    bank = load_bank(out)
    assert bank.names == expected.names
    assert bank.dim == config.embed_dim
    assert np.allclose(bank.vectors, expected.vectors, atol=1e-6)


def test_train_eval(testdir, corpus_dir):
    """
    Test train, eval in all three modes, and analyze-rc end to end.
    """
    run = os.path.join(testdir, 'run')
    invoke('train', '--data', corpus_dir, '--out', run, '--epochs', 0)
    for name in ('checkpoint.pt', 'loss_trace.csv', 'config.yaml', 'bank.bin'):
        assert os.path.exists(os.path.join(run, name))
    assert len(LossTrace.from_csv(os.path.join(run, 'loss_trace.csv'))) == 0

    base = os.path.join(run, 'bank.bin')
    novel = os.path.join(testdir, 'novel.bin')
    full = os.path.join(testdir, 'full.bin')
    invoke('bank', '--data', corpus_dir, '--out', novel, '--split', 'novel')
    invoke('bank', '--data', corpus_dir, '--out', full)
    ckpt = os.path.join(run, 'checkpoint.pt')

    closed = os.path.join(testdir, 'closed')
    invoke('eval', '--ckpt', ckpt, '--bank', base, '--dataset', corpus_dir, '--out', closed)
    report = EvalReport.from_json(os.path.join(closed, 'report.json'))
    assert report.settings['nms_iou'] == 0.5
    assert os.path.exists(os.path.join(closed, AP_CURVE_FILE))
    assert sum(read_histogram_csv(os.path.join(closed, HISTOGRAM_FILE)).values()) == pytest.approx(1.0)

    opened = os.path.join(testdir, 'open')
    invoke('eval', '--ckpt', ckpt, '--bank', base, '--dataset', corpus_dir, '--mode', 'open',
           '--novel-bank', novel, '--out', opened)
    with open(os.path.join(opened, 'report.json')) as f:
        assert 'ap_novel' in json.load(f)

    transfer = os.path.join(testdir, 'transfer')
    invoke('transf', '--ckpt', ckpt, '--bank', full, '--dataset', corpus_dir, '--out', transfer)
    assert EvalReport.from_json(os.path.join(transfer, 'report.json')).settings['nms_iou'] == 0.6

    # Ranking against teacher embeddings needs a bank in the teacher's space
    shared = os.path.join(testdir, 'shared.bin')
    invoke('bank', '--data', corpus_dir, '--out', shared, '--mode', 'attribute', '--dim', 64)
    rc = os.path.join(testdir, 'rc')
    invoke('analyze-rc', '--dataset', corpus_dir, '--bank', shared, '--out', rc, '--k', 1, '--k', 12)
    recall = read_rc_csv(os.path.join(rc, RC_FILE))
    assert set(recall) == {1, 12}
    assert recall[12] == 1.0
    assert sum(read_histogram_csv(os.path.join(rc, HISTOGRAM_FILE)).values()) == pytest.approx(1.0)


def test_open_needs_novel_bank(testdir, corpus_dir):
    run = os.path.join(testdir, 'run')
    invoke('train', '--data', corpus_dir, '--out', run, '--epochs', 0)
    result = CliRunner().invoke(gridclip, ['eval', '--ckpt', os.path.join(run, 'checkpoint.pt'), '--bank',
                                           os.path.join(run, 'bank.bin'), '--dataset', corpus_dir,
                                           '--mode', 'open', '--out', os.path.join(testdir, 'x')])
    assert result.exit_code != 0


def test_generation_failure(testdir):
    result = CliRunner().invoke(gridclip, ['gen-data', '--categories', '3', '--images', '30', '--out',
                                           os.path.join(testdir, 'bad')])
    assert result.exit_code == 1
    result = CliRunner().invoke(gridclip, ['gen-data', '--zipf', '-1', '--out', os.path.join(testdir, 'bad')])
    assert result.exit_code == 2
