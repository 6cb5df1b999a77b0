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
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from gridclip.config import ExperimentConfig, LossWeights, FPN_STRIDES
from gridclip.detector import HeadOutputs, grid_points
from gridclip.textbank import EmbeddingBank
from gridclip.utils import InputError, NonFiniteLossError, TargetError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

Real = Union[float, torch.Tensor]


@dataclass
class GridTargets:
    """
    Per-level targets of one image, as numpy arrays:
    cls (K, H, W), reg (4, H, W), ctr (1, H, W) and pos (H, W).
    """
    cls_targets: List[np.ndarray]
    reg_targets: List[np.ndarray]
    ctr_targets: List[np.ndarray]
    pos_masks: List[np.ndarray]

    @property
    def num_positives(self) -> int:
        return int(sum(m.sum() for m in self.pos_masks))

    def flat(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Levels concatenated cell-wise: (M, K), (M, 4), (M,), (M,).
        """
        cls = np.concatenate([c.reshape(c.shape[0], -1).T for c in self.cls_targets])
        reg = np.concatenate([r.reshape(4, -1).T for r in self.reg_targets])
        ctr = np.concatenate([c.reshape(-1) for c in self.ctr_targets])
        pos = np.concatenate([m.reshape(-1) for m in self.pos_masks])
        return cls, reg, ctr, pos


def centerness_target(l, t, r, b):
    """
    sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b)), 0 where a side is 0.
    Works elementwise on scalars or arrays.
    """
    l, t, r, b = (np.asarray(v, dtype=np.float64) for v in (l, t, r, b))
    with np.errstate(divide='ignore', invalid='ignore'):
        lr = np.where(np.maximum(l, r) > 0, np.minimum(l, r) / np.maximum(l, r), 0.0)
        tb = np.where(np.maximum(t, b) > 0, np.minimum(t, b) / np.maximum(t, b), 0.0)
    out = np.sqrt(np.clip(lr * tb, 0.0, 1.0))
    return float(out) if out.ndim == 0 else out


def assign_targets(boxes: np.ndarray, labels: Sequence[str], level_shapes: Sequence[Tuple[int, int]],
                   bank: Union[EmbeddingBank, Sequence[str]], scale_ranges: Sequence[Tuple[float, float]],
                   strides: Sequence[int] = FPN_STRIDES) -> GridTargets:
    """
    FCOS assignment. A cell is positive for a box when its point lies
    strictly inside the box and the largest of (l, t, r, b) falls in the
    level's (low, high] range. Several candidate boxes resolve to the
    smallest area, then the lowest box index.
    """
    names = bank.names if isinstance(bank, EmbeddingBank) else list(bank)
    index = {n: i for i, n in enumerate(names)}
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(labels) != len(boxes):
        raise InputError(f'{len(boxes)} boxes but {len(labels)} labels')
    missing = [l for l in labels if l not in index]
    if missing:
        raise TargetError(f'Labels not in the embedding bank: {", ".join(sorted(set(missing)))}')
    if len(level_shapes) != len(strides) or len(scale_ranges) != len(strides):
        raise InputError('Need one shape and one scale range per pyramid level')
    label_idx = np.array([index[l] for l in labels], dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])

    cls_t, reg_t, ctr_t, pos_t = [], [], [], []
    for (h, w), stride, (low, high) in zip(level_shapes, strides, scale_ranges):
        pts = grid_points(h, w, stride)
        cls = np.zeros((len(names), h * w), dtype=np.float32)
        reg = np.zeros((h * w, 4), dtype=np.float32)
        ctr = np.zeros(h * w, dtype=np.float32)
        pos = np.zeros(h * w, dtype=bool)
        if len(boxes):
            x, y = pts[:, 0:1], pts[:, 1:2]
            ltrb = np.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], axis=-1)
            inside = ltrb.min(axis=-1) > 0
            reach = ltrb.max(axis=-1)
            valid = inside & (reach > low) & (reach <= high)
            cand = np.where(valid, areas[None, :], np.inf)
            best = np.argmin(cand, axis=1)
            pos = valid.any(axis=1)
            cells = np.nonzero(pos)[0]
            chosen = ltrb[cells, best[cells]]
            reg[cells] = chosen
            ctr[cells] = centerness_target(chosen[:, 0], chosen[:, 1], chosen[:, 2], chosen[:, 3])
            cls[label_idx[best[cells]], cells] = 1.0
        cls_t.append(cls.reshape(len(names), h, w))
        reg_t.append(reg.T.reshape(4, h, w))
        ctr_t.append(ctr.reshape(1, h, w))
        pos_t.append(pos.reshape(h, w))
    return GridTargets(cls_t, reg_t, ctr_t, pos_t)


def focal_loss(scores: torch.Tensor, cls_target: torch.Tensor, pos_count: int,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """
    Sigmoid focal loss summed over every element and divided by
    max(@pos_count, 1).
    """
    target = cls_target.to(scores.dtype)
    p_t = torch.where(target > 0.5, torch.sigmoid(scores), torch.sigmoid(-scores))
    alpha_t = torch.where(target > 0.5, torch.full_like(scores, alpha), torch.full_like(scores, 1.0 - alpha))
    loss = -alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t.clamp(min=LOG_FLOOR))
    return loss.sum() / max(int(pos_count), 1)


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Elementwise GIoU of corner boxes (..., 4).
    """
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclosure = ew * eh
    iou = inter / union.clamp(min=LOG_FLOOR)
    return iou - (enclosure - union) / enclosure.clamp(min=LOG_FLOOR)


def _ltrb_to_box(d: torch.Tensor) -> torch.Tensor:
    return torch.stack([-d[..., 0], -d[..., 1], d[..., 2], d[..., 3]], dim=-1)


def _empty_like(t: torch.Tensor) -> torch.Tensor:
    # Zero that stays in the autograd graph
    return t.sum() * 0.0


def giou_loss(pred_deltas: torch.Tensor, reg_target: torch.Tensor, pos_mask: Optional[torch.Tensor] = None,
              weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean of 1 - GIoU over the positive locations. Both boxes are decoded
    around the same grid point, so the point itself drops out.
    """
    if pos_mask is not None:
        pred_deltas, reg_target = pred_deltas[pos_mask], reg_target[pos_mask]
        weights = weights[pos_mask] if weights is not None else None
    if pred_deltas.shape[0] == 0:
        return _empty_like(pred_deltas)
    loss = 1.0 - generalized_box_iou(_ltrb_to_box(pred_deltas), _ltrb_to_box(reg_target.to(pred_deltas.dtype)))
    if weights is None:
        return loss.mean()
    weights = weights.to(loss.dtype)
    total = weights.sum()
    if float(total) <= 0:
        return _empty_like(pred_deltas)
    return (loss * weights).sum() / total


def centerness_loss(logits: torch.Tensor, ctr_target: torch.Tensor,
                    pos_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if pos_mask is not None:
        logits, ctr_target = logits[pos_mask], ctr_target[pos_mask]
    if logits.numel() == 0:
        return _empty_like(logits)
    return F.binary_cross_entropy_with_logits(logits, ctr_target.to(logits.dtype), reduction='mean')


def image_align_loss(z_bar_prime: torch.Tensor, z_bar_clip: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """
    Mean absolute difference between the image-level embedding and the
    teacher's. The teacher side never carries gradient.
    """
    if z_bar_prime.shape != z_bar_clip.shape:
        raise InputError(f'Image embedding shape {tuple(z_bar_prime.shape)} does not match '
                         f'teacher shape {tuple(z_bar_clip.shape)}')
    target = z_bar_clip.detach().to(z_bar_prime.dtype)
    if normalize:
        z_bar_prime = F.normalize(z_bar_prime, dim=-1)
        target = F.normalize(target, dim=-1)
    return (z_bar_prime - target).abs().mean()


def _as_float(value: Real) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def total_loss(l_grid: Real, l_image: Real, l_reg: Real, l_ctr: Real,
               weights: LossWeights = None) -> Real:
    """
    w_grid * l_grid + w_image * l_image + l_reg + l_ctr. Floats in, float out;
    tensors in, tensor out.
    """
    weights = weights or LossWeights()
    for name, value in (('l_grid', l_grid), ('l_image', l_image), ('l_reg', l_reg), ('l_ctr', l_ctr)):
        v = _as_float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return weights.w_grid * l_grid + weights.w_image * l_image + l_reg + l_ctr


@dataclass
class LossComponents:
    l_grid: torch.Tensor
    l_image: torch.Tensor
    l_reg: torch.Tensor
    l_ctr: torch.Tensor

    def total(self, weights: LossWeights) -> torch.Tensor:
        return total_loss(self.l_grid, self.l_image, self.l_reg, self.l_ctr, weights)

    def as_floats(self) -> Tuple[float, float, float, float]:
        return tuple(_as_float(v) for v in (self.l_grid, self.l_image, self.l_reg, self.l_ctr))


def _flatten_levels(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    # (B, C, H, W) per level -> (B, sum HW, C)
    return torch.cat([m.flatten(2) for m in maps], dim=2).transpose(1, 2)


def compute_losses(outputs: HeadOutputs, scores: Sequence[torch.Tensor], targets: Sequence[GridTargets],
                   teacher_embeds: Optional[torch.Tensor], config: ExperimentConfig) -> LossComponents:
    """
    The four loss terms for a batch. @scores are the per-level S_i from
    GridCLIPDetector.scores. With @teacher_embeds None, or w_image = 0, the
    image term is a graph-connected zero.
    """
    if len(targets) != outputs.batch_size:
        raise InputError(f'Got targets for {len(targets)} images, batch has {outputs.batch_size}')
    dtype, device = outputs.z_bar_prime.dtype, outputs.z_bar_prime.device
    flat = [t.flat() for t in targets]
    cls_t = torch.as_tensor(np.stack([f[0] for f in flat]), dtype=dtype, device=device)
    reg_t = torch.as_tensor(np.stack([f[1] for f in flat]), dtype=dtype, device=device)
    ctr_t = torch.as_tensor(np.stack([f[2] for f in flat]), dtype=dtype, device=device)
    pos = torch.as_tensor(np.stack([f[3] for f in flat]), device=device)
    n_pos = int(pos.sum())

    s = _flatten_levels(scores)
    deltas = _flatten_levels(outputs.box_deltas)
    ctr_logits = _flatten_levels(outputs.centerness_logits)[..., 0]

    l_grid = focal_loss(s, cls_t, n_pos, config.focal_alpha, config.focal_gamma)
    reg_weights = ctr_t if config.centerness_weighted_reg else None
    l_reg = giou_loss(deltas, reg_t, pos, reg_weights)
    l_ctr = centerness_loss(ctr_logits, ctr_t, pos)
    if teacher_embeds is None or config.loss_weights.w_image == 0:
        l_image = _empty_like(outputs.z_bar_prime)
    else:
        l_image = image_align_loss(outputs.z_bar_prime, teacher_embeds, config.normalize_align)
    return LossComponents(l_grid, l_image, l_reg, l_ctr)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], n_samples: int = 12,
               h: float = 1e-5, seed: int = 0, max_retries: int = 25, min_magnitude: float = 1e-5,
               kink_tolerance: float = 1e-2) -> float:
    """
    Compare autograd against central differences on @n_samples randomly
    chosen coordinates of @params and return the largest relative error
    |analytic - numeric| / max(1e-8, |numeric|).

    A coordinate is redrawn, at most @max_retries times, when the one-sided
    differences disagree (the loss has a kink within h) or when the
    derivative is too small for a meaningful relative error.
    """
    params = list(params)
    if not params:
        raise InputError('grad_check needs at least one parameter')
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)

    def evaluate() -> float:
        with torch.no_grad():
            return float(loss_fn())

    worst, checked = 0.0, 0
    for _ in range(n_samples):
        for _ in range(max_retries):
            which = int(rng.choice(len(params), p=sizes / sizes.sum()))
            coord = int(rng.integers(params[which].numel()))
            flat = params[which].data.view(-1)
            original = flat[coord].item()
            f0 = evaluate()
            flat[coord] = original + h
            f_plus = evaluate()
            flat[coord] = original - h
            f_minus = evaluate()
            flat[coord] = original
            forward, backward = (f_plus - f0) / h, (f0 - f_minus) / h
            numeric = (f_plus - f_minus) / (2 * h)
            if abs(forward - backward) > kink_tolerance * max(1.0, abs(numeric)):
                logger.debug(f'Coordinate {which}:{coord} straddles a kink, resampling')
                continue
            if abs(numeric) < min_magnitude:
                continue
            exact = analytic[which].reshape(-1)[coord].item()
            worst = max(worst, abs(exact - numeric) / max(1e-8, abs(numeric)))
            checked += 1
            break
        else:
            logger.debug(f'No usable coordinate after {max_retries} draws')
    if checked == 0:
        raise InputError('grad_check could not find a differentiable coordinate')
    return worst
