"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import math
import logging
import dataclasses
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Tuple

import yaml
import torch

from gridclip.utils import ConfigError

logger = logging.getLogger(__name__)

# FCOS object-size ranges for an 800px short edge
FCOS_SCALE_RANGES = [(0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, math.inf)]
FPN_STRIDES = (8, 16, 32, 64, 128)

# (long, short) training sizes of the multi-scale protocol at 800px scale
DETECTION_MULTISCALE_SIZES = [(1333, 640), (1333, 672), (1333, 704), (1333, 736), (1333, 768), (1333, 800)]

DEFAULT_TEMPLATES = [
    'a photo of a {}.',
    'a photo of the {}.',
    'a photo of a small {}.',
    'a photo of a large {}.',
    'there is a {} in the scene.',
    'a cropped photo of a {}.',
    'a close-up photo of a {}.',
]

CLIP_PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


def scaled_sizes(sizes: List[Tuple[int, int]], short_edge: int, reference: int = 800) -> List[Tuple[int, int]]:
    """
    Rescale (long, short) size pairs given for a @reference short edge to
    @short_edge.
    """
    f = short_edge / reference
    return [(int(round(l * f)), int(round(s * f))) for l, s in sizes]


def scaled_scale_ranges(image_size: Tuple[int, int], reference: int = 800) -> List[Tuple[float, float]]:
    """
    FCOS scale ranges rescaled by max(@image_size) / @reference.
    """
    f = max(image_size) / reference
    return [(lo * f, hi * f) for lo, hi in FCOS_SCALE_RANGES]


@dataclass
class LossWeights:
    w_grid: float = 1.0
    w_image: float = 10.0


@dataclass
class AugmentationPolicy:
    """
    Training-time augmentation: horizontal flip, aspect-preserving resize to
    one of @sizes ((long, short) pairs, one entry means fixed scale), an
    optional random crop whose edges keep at least @crop_fraction of the
    original, and pixel normalization.
    """
    flip_prob: float = 0.5
    sizes: List[Tuple[int, int]] = field(default_factory=lambda: [(213, 128)])
    crop_fraction: Optional[float] = None
    pixel_mean: Tuple[float, float, float] = CLIP_PIXEL_MEAN
    pixel_std: Tuple[float, float, float] = CLIP_PIXEL_STD

    def validate(self):
        if not self.sizes:
            raise ConfigError('Augmentation policy needs at least one (long, short) size')
        for long_edge, short_edge in self.sizes:
            if long_edge <= 0 or short_edge <= 0 or short_edge > long_edge:
                raise ConfigError(f'Invalid (long, short) size ({long_edge}, {short_edge})')
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f'flip_prob must be in [0, 1], got {self.flip_prob}')
        if self.crop_fraction is not None and not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError(f'crop_fraction must be in (0, 1], got {self.crop_fraction}')
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3:
            raise ConfigError('pixel_mean and pixel_std need one value per channel')
        if any(s <= 0 for s in self.pixel_std):
            raise ConfigError('pixel_std must be positive')

    @classmethod
    def multiscale(cls, short_edge: int = 128, crop_fraction: Optional[float] = 0.5) -> AugmentationPolicy:
        """
        The six-entry multi-scale protocol with random cropping, rescaled to a
        @short_edge desk image.
        """
        return cls(sizes=scaled_sizes(DETECTION_MULTISCALE_SIZES, short_edge), crop_fraction=crop_fraction)


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: Tuple[int, int] = (128, 128)
    embed_dim: int = 32
    teacher_dim: int = 64
    fpn_channels: int = 32
    epochs: int = 12
    batch_size: int = 8
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    backbone_lr_multiplier: float = 0.1
    lr_decay_epochs: List[int] = field(default_factory=lambda: [8, 11])
    lr_decay_factor: float = 0.1
    warmup_iters: int = 100
    warmup_start_factor: float = 0.01
    grad_clip_norm: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    transfer_nms_iou: float = 0.6
    max_detections: int = 300
    pre_nms_topk: int = 1000
    scale_ranges: List[Tuple[float, float]] = field(default_factory=lambda: scaled_scale_ranges((128, 128)))
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # model
    n_heads: int = 4
    convs_per_stage: int = 2
    tower_norm_groups: int = 8
    learnable_tau: bool = False
    tau_init: float = 20.0

    # losses
    centerness_weighted_reg: bool = False
    normalize_align: bool = False

    # inference
    centerness_in_scores: bool = True

    # data
    repeat_threshold: float = 0.001
    use_repeat_factor: bool = True
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    # embeddings
    templates: List[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    text_mode: str = 'hash'
    teacher_backend: str = 'seeded'
    teacher_file: Optional[str] = None

    # runtime
    log_interval: int = 20
    device: str = 'cpu'
    deterministic: bool = True

    def validate(self) -> ExperimentConfig:
        """
        Check every invariant of the configuration, raising ConfigError on
        the first violation. Returns self so calls can be chained.
        """
        if self.epochs <= 0:
            raise ConfigError(f'epochs must be positive, got {self.epochs}')
        if self.batch_size <= 0:
            raise ConfigError(f'batch_size must be positive, got {self.batch_size}')
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError(f'lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}')
        for e in self.lr_decay_epochs:
            if not 0 <= e < self.epochs:
                raise ConfigError(f'Decay epoch {e} is not below epochs ({self.epochs})')
        if self.warmup_iters < 0:
            raise ConfigError('warmup_iters must be non-negative')
        if self.warmup_start_factor <= 0:
            raise ConfigError('warmup_start_factor must be positive')
        if self.base_lr <= 0 or self.backbone_lr_multiplier < 0 or self.weight_decay < 0:
            raise ConfigError('Learning rates and weight decay must be non-negative (base_lr positive)')
        if self.grad_clip_norm <= 0:
            raise ConfigError(f'grad_clip_norm must be positive, got {self.grad_clip_norm}')
        if not 0.0 <= self.score_threshold < 1.0:
            raise ConfigError(f'score_threshold must be in [0, 1), got {self.score_threshold}')
        for name in ('nms_iou', 'transfer_nms_iou'):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f'{name} must be in (0, 1], got {v}')
        if self.max_detections <= 0 or self.pre_nms_topk <= 0:
            raise ConfigError('max_detections and pre_nms_topk must be positive')
        self._validate_scale_ranges()
        if self.embed_dim <= 0 or self.teacher_dim <= 0 or self.fpn_channels <= 0:
            raise ConfigError('Embedding and channel dimensions must be positive')
        if self.fpn_channels % self.tower_norm_groups:
            raise ConfigError(f'tower_norm_groups ({self.tower_norm_groups}) must divide fpn_channels ({self.fpn_channels})')
        if len(self.image_size) != 2 or min(self.image_size) < 32:
            raise ConfigError(f'image_size must be (H, W) with both edges >= 32, got {self.image_size}')
        if not 0.0 < self.repeat_threshold < 1.0:
            raise ConfigError(f'repeat_threshold must be in (0, 1), got {self.repeat_threshold}')
        if self.text_mode not in ('hash', 'attribute'):
            raise ConfigError(f'Unknown text_mode {self.text_mode}')
        if self.teacher_backend not in ('seeded', 'file'):
            raise ConfigError(f'Unknown teacher_backend {self.teacher_backend}')
        if self.teacher_backend == 'file' and not self.teacher_file:
            raise ConfigError('teacher_backend "file" needs teacher_file')
        if self.loss_weights.w_grid < 0 or self.loss_weights.w_image < 0:
            raise ConfigError('Loss weights must be non-negative')
        for t in self.templates:
            if t.count('{}') != 1:
                raise ConfigError(f'Template {t!r} must contain exactly one {{}} placeholder')
        self.augmentation.validate()
        return self

    def _validate_scale_ranges(self):
        if len(self.scale_ranges) != len(FPN_STRIDES):
            raise ConfigError(f'Need {len(FPN_STRIDES)} scale ranges, got {len(self.scale_ranges)}')
        prev_hi = None
        for lo, hi in self.scale_ranges:
            if not lo < hi:
                raise ConfigError(f'Scale range ({lo}, {hi}] is empty')
            if prev_hi is not None and lo != prev_hi:
                raise ConfigError(f'Scale ranges are not contiguous at {prev_hi} / {lo}')
            prev_hi = hi
        if self.scale_ranges[0][0] < 0:
            raise ConfigError('Scale ranges must start at a non-negative bound')
        if not math.isinf(self.scale_ranges[-1][1]):
            raise ConfigError('The last scale range must be unbounded')

    @property
    def grid_only(self) -> bool:
        return self.loss_weights.w_image == 0

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d['image_size'] = list(self.image_size)
        d['scale_ranges'] = [[lo, hi] for lo, hi in self.scale_ranges]
        d['augmentation']['sizes'] = [list(s) for s in self.augmentation.sizes]
        d['augmentation']['pixel_mean'] = list(self.augmentation.pixel_mean)
        d['augmentation']['pixel_std'] = list(self.augmentation.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f'Unknown configuration keys: {", ".join(sorted(unknown))}')
        if 'image_size' in d:
            d['image_size'] = tuple(int(v) for v in d['image_size'])
        if 'scale_ranges' in d:
            d['scale_ranges'] = [(float(lo), float(hi)) for lo, hi in d['scale_ranges']]
        if 'loss_weights' in d:
            lw = d['loss_weights']
            if isinstance(lw, (list, tuple)):
                lw = {'w_grid': lw[0], 'w_image': lw[1]}
            d['loss_weights'] = LossWeights(**{k: float(v) for k, v in lw.items()})
        if 'augmentation' in d:
            aug = dict(d['augmentation'])
            if 'sizes' in aug:
                aug['sizes'] = [tuple(int(v) for v in s) for s in aug['sizes']]
            for k in ('pixel_mean', 'pixel_std'):
                if k in aug:
                    aug[k] = tuple(float(v) for v in aug[k])
            try:
                d['augmentation'] = AugmentationPolicy(**aug)
            except TypeError as e:
                raise ConfigError(f'Invalid augmentation section: {e}') from None
        return cls(**d).validate()


def absolute_warmup(config: ExperimentConfig) -> ExperimentConfig:
    """
    The warmup read literally: start from an absolute rate of 1e-3 and ramp
    to base_lr.
    """
    return config.replace(warmup_start_factor=1e-3 / config.base_lr)


def load_config(path: str) -> ExperimentConfig:
    """
    Load a (possibly partial) YAML config from @path. Missing keys take their
    defaults.
    """
    with open(path, 'r') as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f'Config file {path} must hold a key/value mapping')
    logger.debug(f'Loaded config keys from {path}: {sorted(raw)}')
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, 'w+') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def build_lr_schedule(config: ExperimentConfig, total_iters: int) -> Callable[..., float]:
    """
    Return lr_multiplier(iteration, group='head'): a linear warmup from
    warmup_start_factor to 1 over warmup_iters, times lr_decay_factor for
    every decay epoch already reached. The 'backbone' group is additionally
    scaled by backbone_lr_multiplier.
    """
    config.validate()
    if total_iters < config.warmup_iters:
        raise ConfigError(f'total_iters ({total_iters}) is smaller than warmup_iters ({config.warmup_iters})')
    if total_iters <= 0:
        raise ConfigError('total_iters must be positive')

    warmup = config.warmup_iters
    start = config.warmup_start_factor
    decay_epochs = sorted(config.lr_decay_epochs)
    factor = config.lr_decay_factor
    epochs = config.epochs

    def lr_multiplier(iteration: int, group: str = 'head') -> float:
        if warmup and iteration < warmup:
            m = start + (1.0 - start) * iteration / warmup
        else:
            m = 1.0
        epoch = (iteration * epochs) // total_iters
        for e in decay_epochs:
            if epoch >= e:
                m *= factor
        if group == 'backbone':
            m *= config.backbone_lr_multiplier
        return m

    return lr_multiplier


def clip_gradients(grads: torch.Tensor, max_norm: float) -> torch.Tensor:
    """
    Rescale the flat gradient vector @grads to an L2 norm of at most
    @max_norm. Vectors already inside the ball (zero included) pass through.
    """
    if max_norm <= 0:
        raise ConfigError(f'max_norm must be positive, got {max_norm}')
    norm = torch.linalg.vector_norm(grads)
    if norm <= max_norm:
        return grads.clone()
    return grads * (max_norm / norm)
