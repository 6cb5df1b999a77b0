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

from gridclip.config import ExperimentConfig, load_config, save_config
from gridclip.data import read_corpus
from gridclip.textbank import bank_from_manifest, load_bank, save_bank
from gridclip.training import build_model, run_training, save_checkpoint
from gridclip.utils import GridClipError

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'checkpoint.pt'
TRACE_FILE = 'loss_trace.csv'
CONFIG_FILE = 'config.yaml'
BANK_FILE = 'bank.bin'


@click.command(help='Train a detector on the train split of a corpus.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.option('--bank', 'bank_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Training bank. Defaults to the base categories of the corpus.')
@click.option('--epochs', type=click.IntRange(min=0), default=None, help='Override the configured epochs.')
@click.help_option('-h', '--help')
def train(config_path, data, out, bank_path, epochs):
    """
    Write the checkpoint, loss trace, config and training bank to
    OUT.
    """
    try:
        config = load_config(config_path) if config_path else ExperimentConfig()
        manifest, images = read_corpus(data, split='train')
        if bank_path:
            bank = load_bank(bank_path)
        else:
            bank = bank_from_manifest(manifest, config.templates, config.seed, config.embed_dim,
                                      config.text_mode, split='base')
        model = build_model(config)
        model, trace = run_training(config, images, manifest, model, bank, epochs=epochs)

        os.makedirs(out, exist_ok=True)
        save_checkpoint(os.path.join(out, CHECKPOINT_FILE), model, config, bank)
        trace.to_csv(os.path.join(out, TRACE_FILE))
        save_config(config, os.path.join(out, CONFIG_FILE))
        save_bank(bank, os.path.join(out, BANK_FILE))
        logger.info(f'Wrote checkpoint and {len(trace)}-step loss trace to {out}')
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to train: {repr(e)}')
        sys.exit(1)
