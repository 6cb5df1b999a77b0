"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from .config import ExperimentConfig, load_config, save_config
from .data import generate_dataset, read_corpus, write_corpus
from .textbank import EmbeddingBank, build_bank, bank_from_manifest, extend_bank_open_set
from .backbone import create_teacher
from .detector import GridCLIPDetector
from .postprocess import detect
from .evaluation import evaluate, open_set_eval, transfer_eval
from .training import build_model, run_training, save_checkpoint, load_checkpoint
from .version import __version__

__all__ = [
    'ExperimentConfig', 'load_config', 'save_config',
    'generate_dataset', 'read_corpus', 'write_corpus',
    'EmbeddingBank', 'build_bank', 'bank_from_manifest', 'extend_bank_open_set',
    'create_teacher', 'GridCLIPDetector', 'detect',
    'evaluate', 'open_set_eval', 'transfer_eval',
    'build_model', 'run_training', 'save_checkpoint', 'load_checkpoint',
    '__version__',
]
