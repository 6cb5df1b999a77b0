"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os
import shutil

import pytest

from gridclip.config import AugmentationPolicy, ExperimentConfig, scaled_scale_ranges
from gridclip.data import generate_dataset
from gridclip.textbank import bank_from_manifest

TESTDIR = '/tmp/gridclip'

# Acceptance corpus parameters
CORPUS_SEED = 0
CORPUS_CATEGORIES = 12
CORPUS_IMAGES = 600
CORPUS_ZIPF = 1.2


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale training tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale training run, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def testdir():
    try:
        shutil.rmtree(TESTDIR)
    except FileNotFoundError:
        pass
    os.makedirs(TESTDIR)
    yield TESTDIR


@pytest.fixture(scope='session')
def corpus():
    """
    The acceptance corpus: (manifest, images).
    """
    return generate_dataset(CORPUS_SEED, CORPUS_CATEGORIES, CORPUS_IMAGES, CORPUS_ZIPF)


@pytest.fixture(scope='session')
def train_images(corpus):
    return [im for im in corpus[1] if im.split == 'train']


@pytest.fixture(scope='session')
def val_images(corpus):
    return [im for im in corpus[1] if im.split == 'val']


@pytest.fixture
def tiny_config():
    """
    A config small enough to train for a few iterations in a test.
    """
    return ExperimentConfig(
        image_size=(64, 64),
        epochs=2,
        batch_size=4,
        lr_decay_epochs=[1],
        warmup_iters=2,
        scale_ranges=scaled_scale_ranges((64, 64)),
        augmentation=AugmentationPolicy(sizes=[(64, 64)]),
        log_interval=1,
        use_repeat_factor=False,
    )


@pytest.fixture
def tiny_images(corpus):
    """
    Eight training images and their manifest.
    """
    manifest, images = corpus
    return manifest, [im for im in images if im.split == 'train'][:8]


@pytest.fixture
def full_bank(corpus, tiny_config):
    manifest, _ = corpus
    return bank_from_manifest(manifest, tiny_config.templates, tiny_config.seed, tiny_config.embed_dim)


@pytest.fixture
def base_bank(full_bank):
    return full_bank.subset('base')
