"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from gridclip.config import ExperimentConfig
from gridclip.data import AnnotatedImage, CorpusManifest
from gridclip.detector import GridCLIPDetector
from gridclip.postprocess import DetectionSet, detect, iou_matrix
from gridclip.textbank import EmbeddingBank, extend_bank_open_set
from gridclip.utils import BankError, InputError, assert_exists

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RC_K_DEFAULT = (10, 100, 300)
CURVE_WINDOW = (-10, 10)

AP_CURVE_FILE = 'curve_ap_by_frequency.csv'
RC_FILE = 'rc_at_k.csv'
HISTOGRAM_FILE = 'category_histogram.csv'
REPORT_FILE = 'report.json'


def envelope_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """
    Area under the monotone-decreasing envelope of a precision/recall curve,
    summed over every recall breakpoint.
    """
    if not len(precision):
        return 0.0
    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.nonzero(recall[1:] != recall[:-1])[0] + 1
    return float(np.sum((recall[steps] - recall[steps - 1]) * precision[steps]))


def match_detections(det_image: Sequence[int], det_boxes: np.ndarray, det_scores: np.ndarray,
                     gt_boxes: Dict[int, np.ndarray], iou_threshold: float) -> np.ndarray:
    """
    Greedy matching for one category. Detections are taken by descending
    score (input order breaks ties); each one claims the highest-IoU
    unmatched ground truth of its image with IoU >= @iou_threshold.
    Returns a true-positive flag per detection in that order.
    """
    order = np.argsort(-np.asarray(det_scores), kind='stable')
    matched = {i: np.zeros(len(b), dtype=bool) for i, b in gt_boxes.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, d in enumerate(order):
        gts = gt_boxes.get(det_image[d])
        if gts is None or not len(gts):
            continue
        ious = iou_matrix(det_boxes[d][None], gts)[0]
        ious[matched[det_image[d]]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[det_image[d]][best] = True
            tp[rank] = True
    return tp


def _category_ap(det_image, det_boxes, det_scores, gt_boxes, n_gt, thresholds) -> np.ndarray:
    out = np.zeros(len(thresholds))
    if not len(det_scores):
        return out
    for t, thr in enumerate(thresholds):
        tp = match_detections(det_image, det_boxes, det_scores, gt_boxes, thr)
        tps = np.cumsum(tp)
        fps = np.cumsum(~tp)
        out[t] = envelope_ap(tps / (tps + fps), tps / n_gt)
    return out


def per_threshold_ap(detections: Sequence[DetectionSet], images: Sequence[AnnotatedImage],
                     categories: Sequence[str],
                     iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> Tuple[Dict[str, np.ndarray], List[str]]:
    """
    AP of every category at every threshold. Categories with no ground
    truth in @images are returned separately and left out.
    """
    by_id = {d.image_id: d for d in detections}
    table, excluded = {}, []
    for name in categories:
        gt_boxes, n_gt = {}, 0
        det_image, det_boxes, det_scores = [], [], []
        for i, im in enumerate(images):
            mask = np.array([l == name for l in im.labels], dtype=bool)
            if mask.any():
                gt_boxes[i] = im.boxes.reshape(-1, 4)[mask]
                n_gt += int(mask.sum())
            d = by_id.get(im.image_id)
            if d is None:
                continue
            dm = np.array([c == name for c in d.categories], dtype=bool)
            if dm.any():
                det_image.extend([i] * int(dm.sum()))
                det_boxes.append(d.boxes[dm])
                det_scores.append(d.scores[dm])
        if n_gt == 0:
            excluded.append(name)
            continue
        boxes = np.concatenate(det_boxes) if det_boxes else np.zeros((0, 4))
        scores = np.concatenate(det_scores) if det_scores else np.zeros(0)
        table[name] = _category_ap(det_image, boxes, scores, gt_boxes, n_gt, iou_thresholds)
    if excluded:
        logger.debug(f'No ground truth for {len(excluded)} categories: {", ".join(excluded)}')
    return table, excluded


def compute_ap(detections: Sequence[DetectionSet], images: Sequence[AnnotatedImage], categories: Sequence[str],
               iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> Dict[str, float]:
    """
    Per-category AP averaged over @iou_thresholds.
    """
    table, _ = per_threshold_ap(detections, images, categories, iou_thresholds)
    return {name: float(v.mean()) for name, v in table.items()}


def _mean(values: Sequence[float]) -> Optional[float]:
    if not len(values):
        return None
    # Constant input averages to itself exactly
    if min(values) == max(values):
        return float(values[0])
    return float(np.mean(values))


@dataclass
class BucketAP:
    ap_r: Optional[float]
    ap_c: Optional[float]
    ap_f: Optional[float]
    ap: Optional[float]


def bucket_ap(per_category: Dict[str, float], manifest: CorpusManifest) -> BucketAP:
    """
    Mean AP per frequency bucket and overall. Empty buckets are None.
    Categories the manifest does not know count toward the overall mean
    only.
    """
    buckets = {'rare': [], 'common': [], 'frequent': []}
    for name, ap in per_category.items():
        if name in manifest:
            buckets[manifest.category(name).bucket].append(ap)
    return BucketAP(
        ap_r=_mean(buckets['rare']),
        ap_c=_mean(buckets['common']),
        ap_f=_mean(buckets['frequent']),
        ap=_mean(list(per_category.values())),
    )


@dataclass
class EvalReport:
    per_category: Dict[str, float]
    ap: Optional[float]
    ap_r: Optional[float]
    ap_c: Optional[float]
    ap_f: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_base: Optional[float] = None
    ap_novel: Optional[float] = None
    excluded: List[str] = field(default_factory=list)
    settings: Dict[str, Union[str, float, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)

    def to_json(self, path: str) -> None:
        with open(path, 'w+') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_json(cls, path: str) -> EvalReport:
        assert_exists(path)
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


def report_from_detections(detections: Sequence[DetectionSet], images: Sequence[AnnotatedImage],
                           bank: EmbeddingBank, manifest: CorpusManifest,
                           settings: Optional[dict] = None) -> EvalReport:
    table, excluded = per_threshold_ap(detections, images, bank.names, COCO_IOU_THRESHOLDS)
    i50 = COCO_IOU_THRESHOLDS.index(0.5)
    i75 = COCO_IOU_THRESHOLDS.index(0.75)
    per_category = {name: float(v.mean()) for name, v in table.items()}
    buckets = bucket_ap(per_category, manifest)
    split = dict(zip(bank.names, bank.split))
    return EvalReport(
        per_category=per_category,
        ap=buckets.ap,
        ap_r=buckets.ap_r,
        ap_c=buckets.ap_c,
        ap_f=buckets.ap_f,
        ap50=_mean([float(v[i50]) for v in table.values()]),
        ap75=_mean([float(v[i75]) for v in table.values()]),
        ap_base=_mean([ap for n, ap in per_category.items() if split[n] == 'base']),
        ap_novel=_mean([ap for n, ap in per_category.items() if split[n] == 'novel']),
        excluded=excluded,
        settings=dict(settings or {}),
    )


def evaluate(model: GridCLIPDetector, bank: EmbeddingBank, images: Sequence[AnnotatedImage],
             manifest: CorpusManifest, config: ExperimentConfig, nms_iou: Optional[float] = None) -> EvalReport:
    """
    Detect on @images with @bank and score the result.
    """
    nms_iou = config.nms_iou if nms_iou is None else nms_iou
    detections = detect(model, images, bank, config, nms_iou)
    report = report_from_detections(detections, images, bank, manifest, {
        'bank_hash': bank.content_hash(),
        'nms_iou': nms_iou,
        'score_threshold': config.score_threshold,
        'max_detections': config.max_detections,
        'pre_nms_topk': config.pre_nms_topk,
    })
    logger.info(f'AP {_fmt(report.ap)} (r {_fmt(report.ap_r)}, c {_fmt(report.ap_c)}, f {_fmt(report.ap_f)}) '
                f'AP50 {_fmt(report.ap50)} over {len(images)} images')
    return report


def _fmt(v: Optional[float]) -> str:
    return '-' if v is None else f'{v:.4f}'


def open_set_eval(model: GridCLIPDetector, base_bank: EmbeddingBank, novel_names: Sequence[str],
                  novel_vectors, images: Sequence[AnnotatedImage], manifest: CorpusManifest,
                  config: ExperimentConfig) -> EvalReport:
    """
    Evaluate with @base_bank extended by the novel categories.
    """
    bank = extend_bank_open_set(base_bank, novel_names, novel_vectors)
    return evaluate(model, bank, images, manifest, config)


def transfer_eval(model: GridCLIPDetector, replacement_bank: EmbeddingBank, images: Sequence[AnnotatedImage],
                  manifest: CorpusManifest, config: ExperimentConfig, nms_iou: Optional[float] = None) -> EvalReport:
    """
    Swap in @replacement_bank without finetuning and evaluate at the
    transfer NMS IoU.
    """
    nms_iou = config.transfer_nms_iou if nms_iou is None else nms_iou
    return evaluate(model, replacement_bank, images, manifest, config, nms_iou)


@dataclass
class RecallAtK:
    recall: Dict[int, float]
    n_images: int
    n_skipped: int


def rc_at_k(image_embeds: Union[np.ndarray, torch.Tensor], bank: EmbeddingBank, images: Sequence[AnnotatedImage],
            k_list: Sequence[int] = RC_K_DEFAULT) -> RecallAtK:
    """
    Rank the bank by cosine similarity to each image embedding and measure
    the fraction of the image's categories in the top k.
    """
    if isinstance(image_embeds, torch.Tensor):
        image_embeds = image_embeds.detach().cpu().numpy()
    emb = np.asarray(image_embeds, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(images):
        raise InputError(f'Need one embedding per image, got shape {emb.shape} for {len(images)} images')
    if emb.shape[1] != bank.dim:
        raise BankError(f'Image embeddings have dim {emb.shape[1]}, bank has {bank.dim}')
    if any(k < 1 for k in k_list):
        raise InputError('k must be at least 1')
    emb = emb / np.clip(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12, None)
    sims = emb @ bank.vectors.astype(np.float64).T
    names = bank.names
    sums = {k: 0.0 for k in k_list}
    used, skipped = 0, 0
    for i, im in enumerate(images):
        gt = set(im.categories)
        if not gt:
            skipped += 1
            continue
        ranked = np.argsort(-sims[i], kind='stable')
        rank_of = {names[j]: r for r, j in enumerate(ranked)}
        ranks = [rank_of.get(c) for c in gt]
        for k in k_list:
            sums[k] += sum(1 for r in ranks if r is not None and r < k) / len(gt)
        used += 1
    if skipped:
        logger.debug(f'Skipped {skipped} images without categories')
    return RecallAtK({k: (sums[k] / used if used else 0.0) for k in k_list}, used, skipped)


def category_count_histogram(images: Sequence[AnnotatedImage]) -> Dict[int, float]:
    """
    Share of images holding n distinct categories, for every n observed.
    """
    if not images:
        return {}
    counts = np.bincount([len(im.categories) for im in images])
    return {int(n): float(c / len(images)) for n, c in enumerate(counts) if c}


def moving_average_curve(values: Sequence[float], window: Tuple[int, int] = CURVE_WINDOW) -> np.ndarray:
    """
    Mean over [i + window[0], i + window[1]], truncated at the series ends.
    """
    lo, hi = window
    if lo > 0 or hi < 0:
        raise InputError(f'Window {window} does not contain its center')
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(n)
    a = np.clip(idx + lo, 0, n)
    b = np.clip(idx + hi + 1, 0, n)
    return (c[b] - c[a]) / (b - a)


@dataclass
class CurveRow:
    category: str
    frequency: int
    ap: float
    smoothed: float


def ap_by_frequency(per_category: Dict[str, float], manifest: CorpusManifest,
                    window: Tuple[int, int] = CURVE_WINDOW) -> List[CurveRow]:
    """
    Per-category AP sorted by image frequency ascending (ties by name), with
    its moving average.
    """
    known = [n for n in per_category if n in manifest]
    known.sort(key=lambda n: (manifest.category(n).image_frequency, n))
    smoothed = moving_average_curve([per_category[n] for n in known], window)
    return [CurveRow(n, manifest.category(n).image_frequency, per_category[n], float(s))
            for n, s in zip(known, smoothed)]


def write_ap_curve_csv(rows: Sequence[CurveRow], path: str) -> None:
    with open(path, 'w+', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['category', 'frequency', 'ap', 'smoothed'])
        for r in rows:
            writer.writerow([r.category, r.frequency, repr(float(r.ap)), repr(float(r.smoothed))])


def read_ap_curve_csv(path: str) -> List[CurveRow]:
    assert_exists(path)
    with open(path, 'r', newline='') as f:
        return [CurveRow(r['category'], int(r['frequency']), float(r['ap']), float(r['smoothed']))
                for r in csv.DictReader(f)]


def write_rc_csv(result: RecallAtK, path: str) -> None:
    with open(path, 'w+', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['k', 'recall'])
        for k in sorted(result.recall):
            writer.writerow([k, repr(float(result.recall[k]))])


def read_rc_csv(path: str) -> Dict[int, float]:
    assert_exists(path)
    with open(path, 'r', newline='') as f:
        return {int(r['k']): float(r['recall']) for r in csv.DictReader(f)}


def write_histogram_csv(histogram: Dict[int, float], path: str) -> None:
    with open(path, 'w+', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['n_categories', 'probability'])
        for n in sorted(histogram):
            writer.writerow([n, repr(float(histogram[n]))])


def read_histogram_csv(path: str) -> Dict[int, float]:
    assert_exists(path)
    with open(path, 'r', newline='') as f:
        return {int(r['n_categories']): float(r['probability']) for r in csv.DictReader(f)}
