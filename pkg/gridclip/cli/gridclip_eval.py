"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os
import sys
import logging

import click

from gridclip.data import read_corpus
from gridclip.evaluation import AP_CURVE_FILE, HISTOGRAM_FILE, REPORT_FILE, EvalReport, ap_by_frequency, \
        category_count_histogram, evaluate as run_eval, open_set_eval, transfer_eval, write_ap_curve_csv, \
        write_histogram_csv
from gridclip.textbank import load_bank
from gridclip.training import load_checkpoint
from gridclip.utils import GridClipError

logger = logging.getLogger(__name__)


def _write_outputs(report: EvalReport, manifest, images, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    report.to_json(os.path.join(out, REPORT_FILE))
    write_ap_curve_csv(ap_by_frequency(report.per_category, manifest), os.path.join(out, AP_CURVE_FILE))
    write_histogram_csv(category_count_histogram(images), os.path.join(out, HISTOGRAM_FILE))
    logger.info(f'Wrote evaluation report to {out}')


@click.command('eval', help='Evaluate a checkpoint on the val split of a corpus. Writes report.json, '
                             'the AP-by-frequency curve and the category-count histogram. RC@k needs '
                             'teacher embeddings and is written by analyze-rc.')
@click.option('--ckpt', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--bank', 'bank_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--dataset', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--mode', type=click.Choice(['closed', 'open', 'transfer']), default='closed', show_default=True)
@click.option('--novel-bank', 'novel_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Novel categories appended to BANK in open mode.')
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.help_option('-h', '--help')
def evaluate(ckpt, bank_path, dataset, mode, novel_path, out):
    """
    Closed mode scores with BANK, open mode with BANK extended by the novel
    bank, transfer mode with BANK swapped in at the transfer NMS IoU.
    """
    try:
        model, config, _ = load_checkpoint(ckpt)
        bank = load_bank(bank_path)
        manifest, images = read_corpus(dataset, split='val')
        if mode == 'open':
            if novel_path is None:
                raise click.UsageError('--mode open needs --novel-bank')
            novel = load_bank(novel_path)
            report = open_set_eval(model, bank, novel.names, novel.vectors, images, manifest, config)
        elif mode == 'transfer':
            report = transfer_eval(model, bank, images, manifest, config)
        else:
            report = run_eval(model, bank, images, manifest, config)
        _write_outputs(report, manifest, images, out)
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to evaluate: {repr(e)}')
        sys.exit(1)


@click.command(help='Evaluate a checkpoint with a replacement category bank. Writes the same files as eval.')
@click.option('--ckpt', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--bank', 'bank_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--dataset', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.help_option('-h', '--help')
def transfer(ckpt, bank_path, dataset, out):
    try:
        model, config, _ = load_checkpoint(ckpt)
        manifest, images = read_corpus(dataset, split='val')
        report = transfer_eval(model, load_bank(bank_path), images, manifest, config)
        _write_outputs(report, manifest, images, out)
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to run transfer evaluation: {repr(e)}')
        sys.exit(1)
