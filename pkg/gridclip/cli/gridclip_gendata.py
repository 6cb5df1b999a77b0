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

from gridclip.data import generate_dataset, write_corpus
from gridclip.utils import GridClipError

logger = logging.getLogger(__name__)


class PositiveFloat(click.ParamType):
    """
    Parse a strictly positive real.
    """
    name = 'positive float'

    def convert(self, value, param, ctx):
        try:
            v = float(value)
        except (TypeError, ValueError):
            self.fail(f'{value} is not a number', param, ctx)
        if not v > 0:
            self.fail(f'{value} must be positive', param, ctx)
        return v


@click.command('gen-data', help='Generate a synthetic long-tail detection corpus.')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--categories', type=click.IntRange(min=3), default=12, show_default=True)
@click.option('--images', type=click.IntRange(min=3), default=600, show_default=True)
@click.option('--zipf', type=PositiveFloat(), default=1.2, show_default=True, help='Zipf exponent of category frequencies.')
@click.option('--size', type=click.IntRange(min=32), default=128, show_default=True, help='Square image edge in pixels.')
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.help_option('-h', '--help')
def gen_data(seed, categories, images, zipf, size, out):
    """
    Write the corpus (manifest, annotations, PNG images) to OUT.
    """
    try:
        manifest, corpus = generate_dataset(seed, categories, images, zipf, (size, size))
        write_corpus(out, manifest, corpus)
    except (GridClipError, OSError) as e:
        logger.error(f'Unable to generate corpus: {repr(e)}')
        sys.exit(1)
