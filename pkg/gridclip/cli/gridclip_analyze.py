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

from gridclip.backbone import create_teacher
from gridclip.config import ExperimentConfig, load_config
from gridclip.data import read_corpus
from gridclip.evaluation import HISTOGRAM_FILE, RC_FILE, RC_K_DEFAULT, category_count_histogram, rc_at_k, \
        write_histogram_csv, write_rc_csv
from gridclip.textbank import load_bank
from gridclip.utils import GridClipError

logger = logging.getLogger(__name__)


@click.command('analyze-rc', help='Recall of image categories by the teacher image embedding. The bank dim must equal teacher_dim.')
@click.option('--dataset', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--bank', 'bank_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.option('--k', 'k_list', type=click.IntRange(min=1), multiple=True, help='Repeatable. Defaults to 10, 100, 300.')
@click.help_option('-h', '--help')
def analyze_rc(dataset, bank_path, config_path, out, k_list):
    """
    Rank BANK against the teacher embedding of every image in DATASET and
    write RC@k plus the categories-per-image histogram.
    """
    try:
        config = load_config(config_path) if config_path else ExperimentConfig()
        bank = load_bank(bank_path)
        _, images = read_corpus(dataset)
        teacher = create_teacher(config)
        embeds = teacher.embed([im.image for im in images], [im.image_id for im in images])
        result = rc_at_k(embeds, bank, images, tuple(k_list) or RC_K_DEFAULT)
        os.makedirs(out, exist_ok=True)
        write_rc_csv(result, os.path.join(out, RC_FILE))
        write_histogram_csv(category_count_histogram(images), os.path.join(out, HISTOGRAM_FILE))
        summary = ', '.join(f'RC@{k} {v:.3f}' for k, v in sorted(result.recall.items()))
        logger.info(f'{summary} over {result.n_images} images')
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to analyze recall: {repr(e)}')
        sys.exit(1)
