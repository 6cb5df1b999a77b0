"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import json
import math
import logging
from abc import ABC, abstractmethod
from enum import Enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from gridclip.config import ExperimentConfig
from gridclip.data import ATTRIBUTES, BACKGROUND, COLORS, TEXTURES
from gridclip.textbank import attribute_basis
from gridclip.utils import ConfigError, InputError, TeacherLookupError, assert_exists, rng_for

logger = logging.getLogger(__name__)

BACKBONE_WIDTHS = (16, 32, 32, 64, 128)
BACKBONE_STRIDE = 32


@dataclass
class BackboneFeatures:
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor


@dataclass
class PooledPair:
    """
    z_bar (B, D) and z (B, D, H5, W5) from one attention pass.
    """
    z_bar: torch.Tensor
    z: torch.Tensor


class Backbone(nn.Module):
    """
    Five stride-2 stages (the first two form the stem) of 3x3 convolutions
    with ReLU. Stages three to five yield C3, C4 and C5.
    """
    def __init__(self, widths: Sequence[int] = BACKBONE_WIDTHS, convs_per_stage: int = 2):
        super().__init__()
        if len(widths) != 5:
            raise ConfigError(f'The backbone needs 5 stage widths, got {len(widths)}')
        if convs_per_stage < 1:
            raise ConfigError('convs_per_stage must be at least 1')
        stages = []
        in_ch = 3
        for w in widths:
            layers = [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.ReLU()]
            for _ in range(convs_per_stage - 1):
                layers += [nn.Conv2d(w, w, 3, stride=1, padding=1), nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)

    @property
    def out_channels(self) -> Tuple[int, int, int]:
        return self.widths[2], self.widths[3], self.widths[4]

    @property
    def final_conv(self) -> nn.Conv2d:
        return [m for m in self.stages[-1] if isinstance(m, nn.Conv2d)][-1]

    def forward(self, images: torch.Tensor) -> BackboneFeatures:
        if images.dim() == 3:
            images = images[None]
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputError(f'Expected a (B, 3, H, W) image batch, got shape {tuple(images.shape)}')
        h, w = images.shape[-2:]
        if h < BACKBONE_STRIDE or w < BACKBONE_STRIDE:
            raise InputError(f'Images must be at least {BACKBONE_STRIDE}x{BACKBONE_STRIDE}, got {h}x{w}')
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise InputError(f'Image size {h}x{w} is not padded to a multiple of {BACKBONE_STRIDE}')
        feats = []
        x = images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return BackboneFeatures(c3=feats[2], c4=feats[3], c5=feats[4])


def global_avg_pool(c5: torch.Tensor) -> torch.Tensor:
    """
    Per-channel spatial mean of a (B, C, H, W) or (C, H, W) map.
    """
    if c5.numel() == 0 or c5.shape[-1] == 0 or c5.shape[-2] == 0:
        raise InputError('Cannot pool an empty feature map')
    return c5.mean(dim=(-2, -1))


class AttentionPool(nn.Module):
    """
    Multi-head self-attention over [mean(C5), flatten(C5)] plus a learnable,
    zero-initialized positional embedding. Token 0 of the output is z_bar,
    the remaining tokens reshape to z.
    """
    def __init__(self, channels: int, grid_size: Tuple[int, int], n_heads: int = 4,
                 out_dim: Optional[int] = None):
        super().__init__()
        out_dim = out_dim or channels
        if channels % n_heads or out_dim % n_heads:
            raise ConfigError(f'{n_heads} heads do not divide the attention dimension {channels}')
        self.n_heads = n_heads
        self.grid_size = tuple(grid_size)
        self.positional_embedding = nn.Parameter(torch.zeros(1 + grid_size[0] * grid_size[1], channels))
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.c_proj = nn.Linear(channels, out_dim)

    @property
    def out_dim(self) -> int:
        return self.c_proj.out_features

    def positional(self, height: int, width: int) -> torch.Tensor:
        pe = self.positional_embedding
        if (height, width) == self.grid_size:
            return pe
        gh, gw = self.grid_size
        spatial = pe[1:].reshape(gh, gw, -1).permute(2, 0, 1)[None]
        spatial = F.interpolate(spatial, size=(height, width), mode='bilinear', align_corners=False)
        return torch.cat([pe[:1], spatial[0].flatten(1).t()], dim=0)

    def forward(self, c5: torch.Tensor) -> PooledPair:
        b, c, h, w = c5.shape
        tokens = c5.flatten(2).transpose(1, 2)
        tokens = torch.cat([tokens.mean(dim=1, keepdim=True), tokens], dim=1)
        tokens = tokens + self.positional(h, w).to(tokens.dtype)

        head_dim = c // self.n_heads
        def heads(t):
            return t.reshape(b, -1, self.n_heads, head_dim).transpose(1, 2)
        q = heads(self.q_proj(tokens))
        k = heads(self.k_proj(tokens))
        v = heads(self.v_proj(tokens))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, 1 + h * w, c)
        out = self.c_proj(out)
        z_bar = out[:, 0]
        z = out[:, 1:].transpose(1, 2).reshape(b, self.out_dim, h, w)
        return PooledPair(z_bar=z_bar, z=z)


def attention_pool(c5: torch.Tensor, pool: AttentionPool) -> PooledPair:
    return pool(c5)


# ---------------------------------------------------------------------------
# Frozen teacher embedders
# ---------------------------------------------------------------------------

# Maps teacher backend to teacher class
backend2class = {}


class TeacherBackend(Enum):
    SEEDED = 'seeded'
    FILE = 'file'


def register_teacher(backend: TeacherBackend):
    """
    Decorates a class to register it with the corresponding TeacherBackend.
    """
    def inner(teacher: Type[TeacherBase]):
        backend2class[backend] = teacher
        return teacher
    return inner


def create_teacher(config: ExperimentConfig, seed: Optional[int] = None) -> TeacherBase:
    """
    Build the frozen teacher named by config.teacher_backend.
    """
    try:
        backend = TeacherBackend(config.teacher_backend)
    except ValueError:
        raise ConfigError(f'No teacher backend named {config.teacher_backend}') from None
    seed = config.seed if seed is None else seed
    teacher = backend2class[backend].from_config(config, seed)
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher


class TeacherBase(nn.Module, ABC):
    """
    A frozen image embedder producing z_bar_CLIP. Never trained.
    """
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    @classmethod
    @abstractmethod
    def from_config(cls, config: ExperimentConfig, seed: int) -> TeacherBase:
        pass

    @abstractmethod
    def _embed(self, images: Sequence[np.ndarray], image_ids: Sequence[str]) -> torch.Tensor:
        pass

    def train(self, mode: bool = True):
        # Frozen, whatever the parent module asks for
        return super().train(False)

    @torch.no_grad()
    def embed(self, images: Sequence[np.ndarray], image_ids: Sequence[str]) -> torch.Tensor:
        """
        Embed raw [0, 1] images of shape (3, H, W). Returns (B, dim) with no
        autograd history.
        """
        if len(images) != len(image_ids):
            raise InputError('Need one image id per image')
        out = self._embed(images, image_ids)
        if out.shape != (len(images), self.dim):
            raise InputError(f'Teacher produced shape {tuple(out.shape)}, expected ({len(images)}, {self.dim})')
        return out.detach()


@register_teacher(TeacherBackend.SEEDED)
class SeededTeacher(TeacherBase):
    """
    A fixed encoder over rendered attributes: soft palette-color maps,
    stripe/checker texture responses and shape responses read off the
    foreground outline. Its readout is the attribute basis shared with
    attribute-mode text embeddings, plus a seeded random readout of spatially
    pooled responses.

    Shape evidence comes from the orientation of the outline and from its
    concave corners:
      - the 3-fold harmonic of outline normals is large only for the
        apex-up triangle (the other shapes are centrally symmetric)
      - the 4-fold harmonic is large for axis-aligned outlines
        (rectangle, cross) and near zero for the ellipse
      - a small morphological closing fills the concave corners of a cross
        and leaves convex outlines alone
    """
    COLOR_SHARPNESS = 0.02
    EDGE_FLOOR = 0.1
    POOL_GRID = 4
    SPATIAL_WEIGHT = 0.5
    # Foreground is anything this far (RGB distance) from the flat background
    FG_LOW = 0.1
    FG_HIGH = 0.2
    CLOSING_RADIUS = 2
    CONCAVITY_SCALE = 0.01

    def __init__(self, seed: int, dim: int, input_size: Tuple[int, int] = (128, 128)):
        super().__init__(dim)
        self.input_size = tuple(input_size)
        self.register_buffer('palette', torch.tensor(list(COLORS.values()), dtype=torch.float32))
        sobel = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
        self.register_buffer('sobel', torch.stack([sobel, sobel.t()])[:, None])
        basis = attribute_basis(seed, dim)
        self.attribute_readout = nn.Linear(len(ATTRIBUTES), dim, bias=False)
        self.attribute_readout.weight.data.copy_(torch.tensor(basis, dtype=torch.float32))
        n_channels = 2 * len(COLORS) + len(COLORS) + len(TEXTURES)
        n_feats = n_channels * (1 + self.POOL_GRID ** 2)
        rng = rng_for(seed, 'teacher-readout', dim)
        self.spatial_readout = nn.Linear(n_feats, dim, bias=False)
        self.spatial_readout.weight.data.copy_(torch.tensor(
            rng.standard_normal((dim, n_feats)) / math.sqrt(n_feats), dtype=torch.float32))

    @classmethod
    def from_config(cls, config: ExperimentConfig, seed: int) -> SeededTeacher:
        return cls(seed, config.teacher_dim, config.image_size)

    def responses(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Per-pixel color maps (B, 6, H, W) and texture maps (B, 4, H, W).
        """
        d2 = ((x[:, None] - self.palette[None, :, :, None, None]) ** 2).sum(dim=2)
        colors = torch.exp(-d2 / self.COLOR_SHARPNESS)
        fg = colors.sum(dim=1, keepdim=True).clamp(max=1.0)
        y = x.mean(dim=1, keepdim=True)
        dx = F.pad((y[..., :, 1:] - y[..., :, :-1]).abs(), (0, 1, 0, 0))
        dy = F.pad((y[..., 1:, :] - y[..., :-1, :]).abs(), (0, 0, 0, 1))
        ax = F.relu(dx - self.EDGE_FLOOR)
        ay = F.relu(dy - self.EDGE_FLOOR)
        hstriped = F.relu(ay - ax)
        vstriped = F.relu(ax - ay)
        checkered = torch.minimum(ax, ay)
        solid = fg * (1.0 - (ax + ay).clamp(max=1.0))
        return colors, torch.cat([solid, hstriped, vstriped, checkered], dim=1)

    def foreground(self, x: torch.Tensor) -> torch.Tensor:
        """
        A (B, 1, H, W) object mask in [0, 1], covering both the fill and the
        darkened texture of every object.
        """
        dist = (x - BACKGROUND).norm(dim=1, keepdim=True)
        return ((dist - self.FG_LOW) / (self.FG_HIGH - self.FG_LOW)).clamp(0.0, 1.0)

    def shape_evidence(self, x: torch.Tensor) -> torch.Tensor:
        """
        Soft (B, 4) evidence for rectangle, ellipse, triangle and cross.
        """
        mask = self.foreground(x)
        g = F.conv2d(F.pad(mask, (1, 1, 1, 1), mode='replicate'), self.sobel)
        gx, gy = g[:, 0], g[:, 1]
        weight = (gx ** 2 + gy ** 2).sqrt()
        c = gx / weight.clamp(min=1e-6)
        s = gy / weight.clamp(min=1e-6)
        perimeter = weight.sum(dim=(1, 2)).clamp(min=1e-6)
        threefold = F.relu((weight * (3 * s - 4 * s ** 3)).sum(dim=(1, 2)) / perimeter)
        fourfold = F.relu((weight * (1 - 8 * c ** 2 * s ** 2)).sum(dim=(1, 2)) / perimeter)

        closed = mask
        for _ in range(self.CLOSING_RADIUS):
            closed = _plus_max(closed)
        for _ in range(self.CLOSING_RADIUS):
            closed = -_plus_max(-closed)
        filled = F.relu(closed - mask).sum(dim=(1, 2, 3))
        concave = 1.0 - torch.exp(-filled / perimeter / self.CONCAVITY_SCALE)

        aligned = fourfold.clamp(max=1.0)
        evidence = torch.stack([
            aligned * (1.0 - concave),
            F.relu(1.0 - aligned - threefold),
            threefold,
            aligned * concave,
        ], dim=1)
        # No outline, no shape
        return evidence * (weight.sum(dim=(1, 2)) > 1.0).to(evidence.dtype)[:, None]

    def _embed(self, images: Sequence[np.ndarray], image_ids: Sequence[str]) -> torch.Tensor:
        x = torch.stack([
            F.interpolate(torch.as_tensor(np.ascontiguousarray(im), dtype=torch.float32)[None],
                          size=self.input_size, mode='bilinear', align_corners=False)[0]
            for im in images
        ]).to(self.palette.device)
        colors, textures = self.responses(x)
        groups = [colors.mean(dim=(2, 3)), textures.mean(dim=(2, 3)), self.shape_evidence(x)]
        # Each attribute group reads as a distribution over its values
        evidence = torch.cat([v / v.sum(dim=1, keepdim=True).clamp(min=1e-6) for v in groups], dim=1)
        evidence = evidence / evidence.norm(dim=1, keepdim=True).clamp(min=1e-6)

        maps = torch.cat([colors, textures, colors * textures[:, 1:2], colors * textures[:, 2:3]], dim=1)
        pooled = torch.cat([
            maps.mean(dim=(2, 3)),
            F.adaptive_avg_pool2d(maps, self.POOL_GRID).flatten(1),
        ], dim=1)
        pooled = pooled / pooled.norm(dim=1, keepdim=True).clamp(min=1e-6)
        return self.attribute_readout(evidence) + self.SPATIAL_WEIGHT * self.spatial_readout(pooled)


def _plus_max(x: torch.Tensor) -> torch.Tensor:
    """
    Dilation of a (B, 1, H, W) map by the 4-neighbour cross.
    """
    p = F.pad(x, (1, 1, 1, 1), mode='replicate')
    return torch.stack([
        p[..., 1:-1, 1:-1], p[..., :-2, 1:-1], p[..., 2:, 1:-1], p[..., 1:-1, :-2], p[..., 1:-1, 2:],
    ]).amax(dim=0)


def save_teacher_table(table: Dict[str, Sequence[float]], path: str) -> None:
    with open(path, 'w+') as f:
        json.dump({k: [float(v) for v in vec] for k, vec in table.items()}, f)


def load_teacher_table(path: str) -> Dict[str, List[float]]:
    assert_exists(path)
    with open(path, 'r') as f:
        return json.load(f)


@register_teacher(TeacherBackend.FILE)
class FileTeacher(TeacherBase):
    """
    Precomputed embeddings looked up by image id, e.g. exported from a real
    CLIP image encoder.
    """
    def __init__(self, table: Dict[str, Sequence[float]], dim: Optional[int] = None):
        if not table:
            raise InputError('The teacher table is empty')
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise InputError(f'Teacher table rows have mixed dimensions {sorted(dims)}')
        table_dim = dims.pop()
        if dim is not None and dim != table_dim:
            raise ConfigError(f'Teacher table has dim {table_dim}, config expects {dim}')
        super().__init__(table_dim)
        ids = sorted(table)
        self._row = {k: i for i, k in enumerate(ids)}
        self.register_buffer('table', torch.tensor([table[k] for k in ids], dtype=torch.float32))

    @classmethod
    def from_config(cls, config: ExperimentConfig, seed: int) -> FileTeacher:
        return cls(load_teacher_table(config.teacher_file), config.teacher_dim)

    def _embed(self, images: Sequence[np.ndarray], image_ids: Sequence[str]) -> torch.Tensor:
        missing = [i for i in image_ids if i not in self._row]
        if missing:
            raise TeacherLookupError(f'No teacher embedding for image id(s) {", ".join(missing)}')
        return self.table[[self._row[i] for i in image_ids]]


def teacher_embed(images: Sequence[np.ndarray], image_ids: Sequence[str], teacher: TeacherBase) -> torch.Tensor:
    return teacher.embed(images, image_ids)
