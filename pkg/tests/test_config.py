"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os
import math

import pytest
import torch

from gridclip.config import ExperimentConfig, LossWeights, build_lr_schedule, clip_gradients, load_config, \
        absolute_warmup, save_config
from gridclip.utils import ConfigError, project_path


def test_defaults():
    """
    Test that the default config validates and carries the documented values.
    """
    config = ExperimentConfig().validate()
    assert config.loss_weights == LossWeights(1.0, 10.0)
    assert config.score_threshold == 0.05
    assert config.nms_iou == 0.5
    assert config.transfer_nms_iou == 0.6
    assert config.max_detections == 300
    assert config.focal_alpha == 0.25 and config.focal_gamma == 2.0
    assert math.isinf(config.scale_ranges[-1][1])
    assert config.scale_ranges[0] == pytest.approx((0.0, 10.24))
    assert not config.grid_only


@pytest.mark.parametrize('changes', [
    {'epochs': 0},
    {'batch_size': 0},
    {'lr_decay_factor': 1.0},
    {'lr_decay_epochs': [12]},
    {'score_threshold': 1.0},
    {'nms_iou': 0.0},
    {'max_detections': 0},
    {'scale_ranges': [(0, 10), (10, 20), (20, 40), (40, 80), (80, 160)]},
    {'scale_ranges': [(0, 10), (11, 20), (20, 40), (40, 80), (80, math.inf)]},
    {'templates': ['a photo of a thing']},
    {'text_mode': 'clip'},
    {'teacher_backend': 'file'},
])
def test_invalid_config(changes):
    """
    Test that every invariant violation raises a ConfigError.
    """
    with pytest.raises(ConfigError):
        ExperimentConfig(**changes).validate()


def test_lr_schedule_decay():
    """
    Test the step decay at epoch 17 of a 24 epoch schedule decaying at 16 and 22.
    """
    config = ExperimentConfig(epochs=24, lr_decay_epochs=[16, 22], warmup_iters=500)
    schedule = build_lr_schedule(config, total_iters=2400)
    assert schedule(1700) == pytest.approx(0.1)
    assert schedule(2300) == pytest.approx(0.01)
    assert schedule(1000) == 1.0


def test_lr_schedule_warmup():
    """
    Test the linear warmup endpoints and midpoint.
    """
    config = ExperimentConfig(warmup_iters=100, warmup_start_factor=0.01)
    schedule = build_lr_schedule(config, total_iters=1200)
    assert schedule(0) == pytest.approx(0.01)
    assert schedule(50) == pytest.approx(0.505)
    assert schedule(100) == 1.0


def test_lr_schedule_backbone_group():
    """
    Test that the backbone group runs at backbone_lr_multiplier of the head.
    """
    config = ExperimentConfig()
    schedule = build_lr_schedule(config, total_iters=1200)
    for it in (0, 50, 400, 900, 1150):
        assert schedule(it, 'backbone') == pytest.approx(schedule(it, 'head') * 0.1)


def test_lr_schedule_monotone():
    """
    Test that the multiplier never increases after warmup.
    """
    config = ExperimentConfig()
    schedule = build_lr_schedule(config, total_iters=1200)
    values = [schedule(it) for it in range(config.warmup_iters, 1200)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert len(set(values)) == 1 + len(config.lr_decay_epochs)


def test_lr_schedule_too_short():
    with pytest.raises(ConfigError):
        build_lr_schedule(ExperimentConfig(warmup_iters=100), total_iters=50)


def test_clip_gradients():
    """
    Test the clipping examples: at the boundary, above it and at zero.
    """
    g = torch.tensor([0.06, 0.08], dtype=torch.float64)
    assert torch.equal(clip_gradients(g, 0.1), g)
    clipped = clip_gradients(torch.tensor([0.12, 0.16], dtype=torch.float64), 0.1)
    assert torch.allclose(clipped, torch.tensor([0.06, 0.08], dtype=torch.float64))
    zero = torch.zeros(5)
    assert torch.equal(clip_gradients(zero, 0.1), zero)
    with pytest.raises(ConfigError):
        clip_gradients(g, 0.0)


def test_clip_gradients_idempotent():
    torch.manual_seed(0)
    for _ in range(20):
        g = torch.randn(17, dtype=torch.float64) * 3
        once = clip_gradients(g, 0.5)
        assert torch.linalg.vector_norm(once) <= torch.linalg.vector_norm(g) + 1e-12
        assert torch.allclose(clip_gradients(once, 0.5), once)


def test_config_file_roundtrip(testdir):
    """
    Test that a saved config loads back equal, infinite scale bound included.
    """
    config = ExperimentConfig(seed=7, learnable_tau=True, lr_decay_epochs=[5, 9])
    path = os.path.join(testdir, 'config.yaml')
    save_config(config, path)
    with open(path) as f:
        assert '.inf' in f.read()
    assert load_config(path) == config


def test_partial_config(testdir):
    """
    Test that a partial file keeps defaults and unknown keys are refused.
    """
    path = os.path.join(testdir, 'partial.yaml')
    with open(path, 'w+') as f:
        f.write('seed: 3\nloss_weights: {w_grid: 1.0, w_image: 0.0}\n')
    config = load_config(path)
    assert config.seed == 3
    assert config.grid_only
    assert config.embed_dim == ExperimentConfig().embed_dim

    with open(path, 'w+') as f:
        f.write('seed: 3\nlearning_rate: 0.1\n')
    with pytest.raises(ConfigError):
        load_config(path)


def test_desk_config():
    """
    Test that the shipped desk config loads.
    """
    config = load_config(project_path('configs/desk.yaml'))
    assert config.learnable_tau
    assert config.text_mode == 'attribute'
    assert config.backbone_lr_multiplier == 1.0
    # Decays keep the 8/12 and 11/12 positions of the standard schedule
    assert [e * 12 / config.epochs for e in config.lr_decay_epochs] == [8, 11]


def test_absolute_warmup():
    config = absolute_warmup(ExperimentConfig())
    assert config.warmup_start_factor == pytest.approx(10.0)
    schedule = build_lr_schedule(config, total_iters=1200)
    assert schedule(0) * config.base_lr == pytest.approx(1e-3)
