"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import logging

import click

from gridclip.cli.aliased_group import AliasedGroup
from gridclip.cli.gridclip_gendata import gen_data
from gridclip.cli.gridclip_bank import bank
from gridclip.cli.gridclip_train import train
from gridclip.cli.gridclip_eval import evaluate, transfer
from gridclip.cli.gridclip_analyze import analyze_rc

logging.basicConfig(format='%(levelname)s: %(message)s', level=logging.INFO)
logger = logging.getLogger(__name__)


@click.group(help='Train and evaluate grid-level CLIP-aligned detectors', cls=AliasedGroup)
@click.option('--debug', flag_value=True, default=False, hidden=True)
@click.help_option('-h', '--help')
def gridclip(debug=False):
    """
    Main gridclip program.
    """
    if debug:
        logging.getLogger().setLevel(logging.DEBUG)


gridclip.add_command(gen_data)
gridclip.add_command(bank)
gridclip.add_command(train)
gridclip.add_command(evaluate)
gridclip.add_command(transfer)
gridclip.add_command(analyze_rc)


def main():
    gridclip()
