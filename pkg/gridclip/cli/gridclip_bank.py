"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import sys
import logging

import click

from gridclip.config import ExperimentConfig, load_config
from gridclip.data import read_manifest
from gridclip.textbank import bank_from_manifest, save_bank
from gridclip.utils import GridClipError

logger = logging.getLogger(__name__)


@click.command(help='Build a category embedding bank for a corpus.')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Take templates, seed, dim and mode defaults from a config file.')
@click.option('--mode', type=click.Choice(['hash', 'attribute']), default=None)
@click.option('--dim', type=click.IntRange(min=1), default=None)
@click.option('--split', type=click.Choice(['base', 'novel', 'all']), default='all', show_default=True)
@click.option('--seed', type=int, default=None)
@click.help_option('-h', '--help')
def bank(data, out, config_path, mode, dim, split, seed):
    """
    Embed the corpus categories with the prompt ensemble and save the bank.
    """
    try:
        config = load_config(config_path) if config_path else ExperimentConfig()
        manifest = read_manifest(data)
        b = bank_from_manifest(
            manifest, config.templates,
            config.seed if seed is None else seed,
            config.embed_dim if dim is None else dim,
            mode or config.text_mode,
            None if split == 'all' else split,
        )
        save_bank(b, out)
        logger.info(f'Wrote {b} to {out}')
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to build embedding bank: {repr(e)}')
        sys.exit(1)
