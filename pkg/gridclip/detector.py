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
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gridclip.backbone import Backbone, AttentionPool, BACKBONE_STRIDE
from gridclip.config import ExperimentConfig, FPN_STRIDES
from gridclip.textbank import EmbeddingBank
from gridclip.utils import BankError, ConfigError, InputError

logger = logging.getLogger(__name__)

TOWER_DEPTH = 4
NORM_EPS = 1e-8
# Upper bound on s_i * raw before exponentiation
MAX_DELTA_EXPONENT = 10.0


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]
    strides: Tuple[int, ...] = FPN_STRIDES

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise InputError(f'A pyramid needs {len(self.strides)} levels, got {len(self.levels)}')

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(p.shape[-2:]) for p in self.levels]


@dataclass
class HeadOutputs:
    """
    Everything the detector computes that does not depend on the embedding
    bank. Per-level lists are ordered P3..P7.
    """
    grid_embeds: List[torch.Tensor]
    box_deltas: List[torch.Tensor]
    centerness_logits: List[torch.Tensor]
    z_bar_prime: torch.Tensor
    z_bar: torch.Tensor
    strides: Tuple[int, ...] = FPN_STRIDES

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(g.shape[-2:]) for g in self.grid_embeds]

    @property
    def batch_size(self) -> int:
        return self.z_bar_prime.shape[0]


def grid_points(height: int, width: int, stride: int) -> np.ndarray:
    """
    Image-space (x, y) of every cell of a @height x @width level, row-major.
    """
    xs = stride // 2 + np.arange(width, dtype=np.float64) * stride
    ys = stride // 2 + np.arange(height, dtype=np.float64) * stride
    yy, xx = np.meshgrid(ys, xs, indexing='ij')
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


class GridAdapter(nn.Module):
    """
    Three 3x3 convolutions taking z from the attention width down to the
    fusion width, ReLU after the first two.
    """
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        ])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.convs[0](z))
        x = F.relu(self.convs[1](x))
        return self.convs[2](x)


def adapt_grid_feature(z: torch.Tensor, adapter: GridAdapter) -> torch.Tensor:
    return adapter(z)


class FPN(nn.Module):
    """
    Top-down pyramid over C3, C4 and [z', C5]. P6 and P7 grow out of the
    projected [z', C5] feature rather than P5.
    """
    def __init__(self, c3_channels: int, c4_channels: int, fused_channels: int, out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList([
            nn.Conv2d(c3_channels, out_channels, 1),
            nn.Conv2d(c4_channels, out_channels, 1),
            nn.Conv2d(fused_channels, out_channels, 1),
        ])
        self.smooth = nn.ModuleList([nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(3)])
        self.p6 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
        self.p7 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
        self.fused_channels = fused_channels

    def forward(self, c3: torch.Tensor, c4: torch.Tensor, c5: torch.Tensor, z_prime: torch.Tensor) -> FeaturePyramid:
        if z_prime.shape[-2:] != c5.shape[-2:]:
            raise InputError(f'z\' is {tuple(z_prime.shape[-2:])} but C5 is {tuple(c5.shape[-2:])}')
        fused = torch.cat([z_prime, c5], dim=1)
        if fused.shape[1] != self.fused_channels:
            raise InputError(f'[z\', C5] has {fused.shape[1]} channels, expected {self.fused_channels}')

        l5 = self.lateral[2](fused)
        l4 = self.lateral[1](c4) + F.interpolate(l5, size=c4.shape[-2:], mode='nearest')
        l3 = self.lateral[0](c3) + F.interpolate(l4, size=c3.shape[-2:], mode='nearest')
        p3, p4, p5 = self.smooth[0](l3), self.smooth[1](l4), self.smooth[2](l5)
        p6 = self.p6(l5)
        p7 = self.p7(F.relu(p6))
        return FeaturePyramid([p3, p4, p5, p6, p7])


def _tower(channels: int, groups: int) -> nn.Sequential:
    layers = []
    for _ in range(TOWER_DEPTH):
        layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.GroupNorm(groups, channels), nn.ReLU()]
    return nn.Sequential(*layers)


def _init_head_convs(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)


class ClsTower(nn.Module):
    """
    Shared classification tower ending in an embed_dim projection: one
    embedding G_i(j) per grid cell.
    """
    def __init__(self, channels: int, embed_dim: int, groups: int):
        super().__init__()
        self.tower = _tower(channels, groups)
        self.embed = nn.Conv2d(channels, embed_dim, 3, padding=1)
        _init_head_convs(self)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return self.embed(self.tower(p))


class BoxTower(nn.Module):
    """
    Shared regression tower with box and centerness outputs. Each level has
    its own learnable scale s_i.
    """
    def __init__(self, channels: int, groups: int, strides: Sequence[int] = FPN_STRIDES):
        super().__init__()
        self.tower = _tower(channels, groups)
        self.bbox = nn.Conv2d(channels, 4, 3, padding=1)
        self.centerness = nn.Conv2d(channels, 1, 3, padding=1)
        _init_head_convs(self)
        self.scales = nn.Parameter(torch.ones(len(strides)))
        self.strides = tuple(strides)

    def forward(self, p: torch.Tensor, level: int) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.tower(p)
        raw = self.bbox(x)
        exponent = torch.clamp(self.scales[level] * raw, max=MAX_DELTA_EXPONENT)
        deltas = torch.exp(exponent) * self.strides[level]
        return deltas, self.centerness(x)


class ImageAlignHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = None):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.layers = nn.ModuleList([
            nn.Linear(in_dim, hidden_dim),
            nn.Linear(hidden_dim, hidden_dim),
            nn.Linear(hidden_dim, out_dim),
        ])

    def forward(self, z_bar: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.layers[0](z_bar))
        x = F.relu(self.layers[1](x))
        return self.layers[2](x)


def _bank_matrix(bank: Union[EmbeddingBank, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if isinstance(bank, EmbeddingBank):
        return bank.tensor(device=like.device, dtype=like.dtype)
    return bank.to(device=like.device, dtype=like.dtype)


def grid_cosine_scores(grid_embeds: torch.Tensor, bank: Union[EmbeddingBank, torch.Tensor],
                       tau: Union[float, torch.Tensor] = 1.0) -> torch.Tensor:
    """
    tau * cos(G_i(j), T_k) for every cell j and category k. @grid_embeds is
    (E, H, W) or (B, E, H, W); the result is (K, H, W) or (B, K, H, W).
    """
    text = _bank_matrix(bank, grid_embeds)
    if text.dim() != 2 or text.shape[0] == 0:
        raise BankError('Cannot score against an empty embedding bank')
    squeeze = grid_embeds.dim() == 3
    g = grid_embeds[None] if squeeze else grid_embeds
    if text.shape[1] != g.shape[1]:
        raise BankError(f'Bank dim {text.shape[1]} does not match grid embedding dim {g.shape[1]}')
    g = g / g.norm(dim=1, keepdim=True).clamp(min=NORM_EPS)
    text = text / text.norm(dim=1, keepdim=True).clamp(min=NORM_EPS)
    scores = torch.einsum('behw,ke->bkhw', g, text) * tau
    return scores[0] if squeeze else scores


class GridCLIPDetector(nn.Module):
    """
    Backbone -> attention pool -> (adapter, FPN, towers) for grids and an
    image-level alignment head on z_bar. Forward never sees the bank, so
    swapping banks only changes scores().
    """
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        config.validate()
        if config.fpn_channels % config.tower_norm_groups:
            raise ConfigError(f'{config.tower_norm_groups} norm groups do not divide {config.fpn_channels} channels')
        self.config = config
        self.backbone = Backbone(convs_per_stage=config.convs_per_stage)
        c3_ch, c4_ch, c5_ch = self.backbone.out_channels
        grid = (config.image_size[0] // BACKBONE_STRIDE, config.image_size[1] // BACKBONE_STRIDE)
        self.attnpool = AttentionPool(c5_ch, grid, config.n_heads)
        self.adapter = GridAdapter(self.attnpool.out_dim, config.fpn_channels)
        self.fpn = FPN(c3_ch, c4_ch, config.fpn_channels + c5_ch, config.fpn_channels)
        self.cls_tower = ClsTower(config.fpn_channels, config.embed_dim, config.tower_norm_groups)
        self.box_tower = BoxTower(config.fpn_channels, config.tower_norm_groups, FPN_STRIDES)
        self.image_head = ImageAlignHead(self.attnpool.out_dim, config.teacher_dim)
        if config.learnable_tau:
            self.tau = nn.Parameter(torch.tensor(float(config.tau_init)))
        else:
            self.register_buffer('tau', torch.tensor(1.0))

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        feats = self.backbone(images)
        pooled = self.attnpool(feats.c5)
        z_prime = self.adapter(pooled.z)
        pyramid = self.fpn(feats.c3, feats.c4, feats.c5, z_prime)
        grid_embeds, box_deltas, centerness = [], [], []
        for level, p in enumerate(pyramid.levels):
            grid_embeds.append(self.cls_tower(p))
            deltas, ctr = self.box_tower(p, level)
            box_deltas.append(deltas)
            centerness.append(ctr)
        return HeadOutputs(
            grid_embeds=grid_embeds,
            box_deltas=box_deltas,
            centerness_logits=centerness,
            z_bar_prime=self.image_head(pooled.z_bar),
            z_bar=pooled.z_bar,
            strides=pyramid.strides,
        )

    def scores(self, outputs: HeadOutputs, bank: Union[EmbeddingBank, torch.Tensor]) -> List[torch.Tensor]:
        return [grid_cosine_scores(g, bank, self.tau) for g in outputs.grid_embeds]

    def param_groups(self) -> Dict[str, List[nn.Parameter]]:
        """
        'backbone' holds the backbone and attention pool, 'head' the rest.
        """
        backbone = list(self.backbone.parameters()) + list(self.attnpool.parameters())
        ids = {id(p) for p in backbone}
        head = [p for p in self.parameters() if id(p) not in ids]
        return {'backbone': backbone, 'head': head}
