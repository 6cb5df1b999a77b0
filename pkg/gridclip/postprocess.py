"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from gridclip.config import ExperimentConfig
from gridclip.data import AnnotatedImage, collate
from gridclip.detector import GridCLIPDetector, HeadOutputs, grid_points
from gridclip.textbank import EmbeddingBank
from gridclip.utils import InputError, assert_exists

logger = logging.getLogger(__name__)


@dataclass
class Candidates:
    """
    Scored boxes before NMS. @order is the global spatial index of the
    cell a candidate came from, used to break score ties.
    """
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    order: np.ndarray

    @classmethod
    def empty(cls) -> Candidates:
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> Candidates:
        return Candidates(self.boxes[idx], self.scores[idx], self.labels[idx], self.order[idx])

    @classmethod
    def concat(cls, parts: Sequence[Candidates]) -> Candidates:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.scores for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.order for p in parts]),
        )

    def ranking(self) -> np.ndarray:
        # score descending, then category, then spatial index
        return np.lexsort((self.order, self.labels, -self.scores))


@dataclass
class DetectionSet:
    image_id: str
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    categories: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scores)

    def to_record(self) -> dict:
        return {
            'image_id': self.image_id,
            'boxes': [[float(v) for v in b] for b in self.boxes],
            'scores': [float(s) for s in self.scores],
            'labels': [int(l) for l in self.labels],
            'categories': list(self.categories),
        }

    @classmethod
    def from_record(cls, record: dict) -> DetectionSet:
        return cls(
            image_id=record['image_id'],
            boxes=np.asarray(record['boxes'], dtype=np.float64).reshape(-1, 4),
            scores=np.asarray(record['scores'], dtype=np.float64),
            labels=np.asarray(record['labels'], dtype=np.int64),
            categories=list(record.get('categories', [])),
        )


def decode_boxes(points: np.ndarray, deltas: np.ndarray, image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    (x - l, y - t, x + r, y + b) per point, clamped to the (height, width)
    image rectangle when @image_size is given.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    boxes = np.stack([
        points[:, 0] - deltas[:, 0], points[:, 1] - deltas[:, 1],
        points[:, 0] + deltas[:, 2], points[:, 1] + deltas[:, 3],
    ], axis=1)
    if image_size is not None:
        h, w = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    return boxes


def score_candidates(scores: torch.Tensor, centerness_logits: Optional[torch.Tensor]) -> np.ndarray:
    """
    sigmoid(S) * sigmoid(centerness) for a (K, H, W) level, as (H*W, K).
    Without centerness logits only sigmoid(S) is returned.
    """
    prob = torch.sigmoid(scores.detach().to(torch.float64))
    if centerness_logits is not None:
        prob = prob * torch.sigmoid(centerness_logits.detach().to(torch.float64))
    return prob.reshape(prob.shape[0], -1).t().cpu().numpy()


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    return float(iou_matrix(np.asarray(box_a)[None], np.asarray(box_b)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU of (N, 4) and (M, 4) corner boxes. Zero where the union is
    empty.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_per_class(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """
    Greedy NMS over one category. Returns the kept indices into @boxes in
    the order they were kept. Input order decides score ties.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind='stable')
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def finalize(levels: Sequence[Candidates], score_threshold: float = 0.05, nms_iou: float = 0.5,
             max_detections: int = 300, pre_nms_topk: Optional[int] = 1000) -> Candidates:
    """
    Drop zero-area boxes, threshold, per-level top-k, per-class NMS, then a
    global sort truncated to @max_detections.
    """
    pooled = []
    for cand in levels:
        boxes = cand.boxes.reshape(-1, 4)
        cand = cand.take((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))
        cand = cand.take(cand.scores >= score_threshold)
        if pre_nms_topk is not None:
            cand = cand.take(cand.ranking()[:pre_nms_topk])
        pooled.append(cand)
    pooled = Candidates.concat(pooled)
    if not len(pooled):
        return pooled

    pooled = pooled.take(pooled.ranking())
    survivors = []
    for label in np.unique(pooled.labels):
        idx = np.nonzero(pooled.labels == label)[0]
        survivors.append(idx[nms_per_class(pooled.boxes[idx], pooled.scores[idx], nms_iou)])
    kept = pooled.take(np.concatenate(survivors))
    return kept.take(kept.ranking()[:max_detections])


def candidates_for_image(outputs: HeadOutputs, scores: Sequence[torch.Tensor], b: int,
                         image_size: Tuple[int, int], use_centerness: bool = True) -> List[Candidates]:
    """
    Every (cell, category) pair of image @b as a candidate, one entry per
    level.
    """
    levels, offset = [], 0
    for s, deltas, ctr, stride in zip(scores, outputs.box_deltas, outputs.centerness_logits, outputs.strides):
        h, w = s.shape[-2:]
        prob = score_candidates(s[b], ctr[b] if use_centerness else None)
        boxes = decode_boxes(grid_points(h, w, stride), deltas[b].detach().reshape(4, -1).t().cpu().numpy(),
                             image_size)
        cells, labels = np.nonzero(prob > 0)
        levels.append(Candidates(boxes[cells], prob[cells, labels], labels.astype(np.int64),
                                 (offset + cells).astype(np.int64)))
        offset += h * w
    return levels


@torch.no_grad()
def detect(model: GridCLIPDetector, images: Sequence[AnnotatedImage], bank: EmbeddingBank,
           config: ExperimentConfig, nms_iou: Optional[float] = None, batch_size: Optional[int] = None) -> List[DetectionSet]:
    """
    Run inference on raw corpus images and return one DetectionSet each.
    """
    nms_iou = config.nms_iou if nms_iou is None else nms_iou
    batch_size = batch_size or config.batch_size
    was_training = model.training
    model.eval()
    results = []
    try:
        for start in range(0, len(images), batch_size):
            chunk = list(images[start:start + batch_size])
            batch = collate(chunk, config.augmentation)
            outputs = model(batch.images.to(config.device))
            scores = model.scores(outputs, bank)
            for b, im in enumerate(chunk):
                levels = candidates_for_image(outputs, scores, b, batch.sizes[b], config.centerness_in_scores)
                kept = finalize(levels, config.score_threshold, nms_iou, config.max_detections, config.pre_nms_topk)
                results.append(DetectionSet(
                    image_id=im.image_id,
                    boxes=kept.boxes,
                    scores=kept.scores,
                    labels=kept.labels,
                    categories=[bank.names[l] for l in kept.labels],
                ))
    finally:
        model.train(was_training)
    logger.debug(f'Detected {sum(len(d) for d in results)} boxes over {len(results)} images')
    return results


def write_detections(detections: Sequence[DetectionSet], path: str) -> None:
    with open(path, 'w+') as f:
        for d in detections:
            f.write(json.dumps(d.to_record()) + '\n')


def read_detections(path: str) -> List[DetectionSet]:
    assert_exists(path)
    out = []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(DetectionSet.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise InputError(f'Malformed detection record on line {lineno} of {path}: {e}') from None
    return out
