"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import csv
import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from gridclip.backbone import TeacherBase, create_teacher
from gridclip.config import ExperimentConfig, build_lr_schedule, clip_gradients
from gridclip.data import AnnotatedImage, CorpusManifest, apply_augmentation, collate, compute_repeat_factors, \
        sample_epoch_indices
from gridclip.detector import GridCLIPDetector
from gridclip.losses import assign_targets, compute_losses, total_loss
from gridclip.textbank import EmbeddingBank
from gridclip.utils import ConfigError, InputError, assert_exists, rng_for, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
TRACE_HEADER = ['iter', 'l_grid', 'l_image', 'l_reg', 'l_ctr', 'total', 'lr']


@dataclass
class TraceRow:
    iter: int
    l_grid: float
    l_image: float
    l_reg: float
    l_ctr: float
    total: float
    lr: float


@dataclass
class LossTrace:
    """
    One row per optimizer step. @total is recomputed from the logged
    components, never read off the autograd graph.
    """
    rows: List[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path: str) -> None:
        with open(path, 'w+', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_HEADER)
            for r in self.rows:
                writer.writerow([r.iter] + [repr(float(getattr(r, k))) for k in TRACE_HEADER[1:]])

    @classmethod
    def from_csv(cls, path: str) -> LossTrace:
        assert_exists(path)
        with open(path, 'r', newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != TRACE_HEADER:
                raise InputError(f'{path} is not a loss trace (header {reader.fieldnames})')
            return cls([TraceRow(int(r['iter']), *(float(r[k]) for k in TRACE_HEADER[1:])) for r in reader])


def build_model(config: ExperimentConfig) -> GridCLIPDetector:
    """
    A freshly initialized detector, seeded from config.seed.
    """
    seed_everything(config.seed, config.deterministic)
    return GridCLIPDetector(config).to(config.device)


def build_optimizer(model: GridCLIPDetector, config: ExperimentConfig) -> torch.optim.AdamW:
    """
    AdamW with a 'backbone' and a 'head' parameter group, both starting at
    base_lr. The schedule applies the backbone multiplier.
    """
    groups = model.param_groups()
    return torch.optim.AdamW(
        [{'params': groups[name], 'name': name} for name in ('backbone', 'head')],
        lr=config.base_lr,
        weight_decay=config.weight_decay,
    )


def _clip_(params: Sequence[torch.nn.Parameter], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    flat = torch.cat([p.grad.reshape(-1) for p in params])
    clipped = clip_gradients(flat, max_norm)
    offset = 0
    for p in params:
        n = p.grad.numel()
        p.grad.copy_(clipped[offset:offset + n].view_as(p.grad))
        offset += n
    return float(torch.linalg.vector_norm(flat))


def _epoch_config(config: ExperimentConfig, epochs: Optional[int]) -> ExperimentConfig:
    if epochs is None or epochs == config.epochs:
        return config
    return config.replace(epochs=epochs, lr_decay_epochs=[e for e in config.lr_decay_epochs if e < epochs])


def run_training(config: ExperimentConfig, images: Sequence[AnnotatedImage], manifest: CorpusManifest,
                 model: GridCLIPDetector, bank: EmbeddingBank, teacher: Optional[TeacherBase] = None,
                 epochs: Optional[int] = None) -> Tuple[GridCLIPDetector, LossTrace]:
    """
    Train @model on @images against @bank. Labels missing from @bank are
    dropped from supervision. Returns the model and its loss trace.
    """
    trace = LossTrace()
    if epochs == 0:
        return model, trace
    if epochs is not None and epochs < 0:
        raise ConfigError(f'epochs must be non-negative, got {epochs}')
    config = _epoch_config(config, epochs).validate()
    if not images:
        raise InputError('Cannot train on an empty dataset')
    seed_everything(config.seed, config.deterministic)

    kept = [im.with_labels(bank.names) for im in images]
    dropped = sum(len(a.labels) - len(b.labels) for a, b in zip(images, kept))
    if dropped:
        logger.debug(f'Dropped {dropped} annotations whose category is not in the training bank')
    by_id = {im.image_id: im for im in kept}

    if config.use_repeat_factor:
        factors = compute_repeat_factors(manifest, kept, config.repeat_threshold)
    else:
        factors = {im.image_id: 1.0 for im in kept}
    iters_per_epoch = int(math.ceil(sum(factors.values()) / config.batch_size))
    total_iters = config.epochs * iters_per_epoch
    schedule = build_lr_schedule(config, total_iters)

    if not config.grid_only and teacher is None:
        teacher = create_teacher(config)
    device = torch.device(config.device)
    model.to(device).train()
    if teacher is not None:
        teacher.to(device)
    optimizer = build_optimizer(model, config)
    lambdas = [lambda it, g=g['name']: schedule(it, g) for g in optimizer.param_groups]
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambdas)

    logger.info(f'Training for {config.epochs} epochs of {iters_per_epoch} iterations '
                f'({len(kept)} images, {len(bank)} categories, grid_only={config.grid_only})')
    iteration = 0
    for epoch in range(config.epochs):
        ids = sample_epoch_indices(factors, rng_for(config.seed, 'epoch', epoch))
        ids = list(np.resize(np.array(ids, dtype=object), iters_per_epoch * config.batch_size))
        epoch_total = 0.0
        for step in range(iters_per_epoch):
            aug_rng = rng_for(config.seed, 'augment', iteration)
            chunk = [apply_augmentation(by_id[i], aug_rng, config.augmentation, normalize=False)
                     for i in ids[step * config.batch_size:(step + 1) * config.batch_size]]
            batch = collate(chunk, config.augmentation)

            embeds = None
            if not config.grid_only:
                embeds = teacher.embed(batch.raw, batch.image_ids).to(device)
            outputs = model(batch.images.to(device))
            scores = model.scores(outputs, bank)
            targets = [assign_targets(boxes, labels, outputs.shapes, bank, config.scale_ranges, outputs.strides)
                       for boxes, labels in zip(batch.boxes, batch.labels)]
            components = compute_losses(outputs, scores, targets, embeds, config)
            loss = components.total(config.loss_weights)

            optimizer.zero_grad()
            loss.backward()
            _clip_(list(model.parameters()), config.grad_clip_norm)
            lr = optimizer.param_groups[1]['lr']
            optimizer.step()
            scheduler.step()

            iteration += 1
            parts = components.as_floats()
            row = TraceRow(iteration, *parts, total_loss(*parts, config.loss_weights), lr)
            trace.append(row)
            epoch_total += row.total
            if iteration % config.log_interval == 0 or iteration == 1:
                logger.info(f'iter {iteration} epoch {epoch} l_grid {row.l_grid:.4f} l_image {row.l_image:.4f} '
                            f'l_reg {row.l_reg:.4f} l_ctr {row.l_ctr:.4f} total {row.total:.4f} lr {lr:.2e}')
        logger.info(f'Epoch {epoch} done, mean total loss {epoch_total / iters_per_epoch:.4f}')
    return model, trace


def save_checkpoint(path: str, model: GridCLIPDetector, config: ExperimentConfig, bank: EmbeddingBank) -> None:
    torch.save({
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'state_dict': {k: v.detach().cpu() for k, v in model.state_dict().items()},
        'config': config.to_dict(),
        'bank': {
            'names': bank.names,
            'vectors': torch.from_numpy(bank.vectors.copy()),
            'split': bank.split,
            'provenance': bank.provenance,
        },
    }, path)


def load_checkpoint(path: str) -> Tuple[GridCLIPDetector, ExperimentConfig, EmbeddingBank]:
    assert_exists(path)
    ckpt = torch.load(path, map_location='cpu')
    version = ckpt.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise InputError(f'Unsupported checkpoint format {version} in {path}')
    config = ExperimentConfig.from_dict(ckpt['config'])
    model = GridCLIPDetector(config)
    model.load_state_dict(ckpt['state_dict'])
    b = ckpt['bank']
    bank = EmbeddingBank(b['names'], b['vectors'], b['split'], b['provenance'])
    return model, config, bank
