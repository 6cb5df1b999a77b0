"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from gridclip.config import ExperimentConfig, LossWeights
from gridclip.data import AnnotatedImage, CorpusManifest
from gridclip.evaluation import open_set_eval
from gridclip.textbank import bank_from_manifest
from gridclip.training import build_model, run_training

logger = logging.getLogger(__name__)

VARIANTS = ('grid_only', 'grid_image')


@dataclass
class AblationRow:
    seed: int
    variant: str
    ap_base: Optional[float]
    ap_novel: Optional[float]


def ablation(config: ExperimentConfig, manifest: CorpusManifest, train_images: Sequence[AnnotatedImage],
             eval_images: Sequence[AnnotatedImage], seeds: Sequence[int] = (0, 1, 2)) -> List[AblationRow]:
    """
    Train a grid-only and a grid+image model per seed on the base
    categories, then evaluate both open-set with the novel categories
    appended to the bank.
    """
    rows = []
    for seed in seeds:
        bank = bank_from_manifest(manifest, config.templates, seed, config.embed_dim, config.text_mode)
        base, novel = bank.subset('base'), bank.subset('novel')
        for variant in VARIANTS:
            w_image = 0.0 if variant == 'grid_only' else config.loss_weights.w_image
            cfg = config.replace(seed=seed, loss_weights=LossWeights(config.loss_weights.w_grid, w_image))
            model, _ = run_training(cfg, train_images, manifest, build_model(cfg), base)
            report = open_set_eval(model, base, novel.names, novel.vectors, eval_images, manifest, cfg)
            rows.append(AblationRow(seed, variant, report.ap_base, report.ap_novel))
            logger.info(f'seed {seed} {variant}: base AP {report.ap_base} novel AP {report.ap_novel}')
    return rows


def summarize(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """
    Seed-averaged base and novel AP per variant. Missing values count as 0.
    """
    out = {}
    for variant in VARIANTS:
        mine = [r for r in rows if r.variant == variant]
        out[variant] = {
            'ap_base': float(np.mean([r.ap_base or 0.0 for r in mine])) if mine else 0.0,
            'ap_novel': float(np.mean([r.ap_novel or 0.0 for r in mine])) if mine else 0.0,
        }
    return out
