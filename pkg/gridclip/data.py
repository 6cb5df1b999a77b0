"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import os
import json
import math
import logging
import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from gridclip.config import AugmentationPolicy
from gridclip.utils import GenerationError, InputError, rng_for, assert_exists

logger = logging.getLogger(__name__)

COLORS = {
    'red': (0.86, 0.16, 0.16),
    'green': (0.18, 0.72, 0.24),
    'blue': (0.16, 0.32, 0.88),
    'yellow': (0.92, 0.84, 0.14),
    'magenta': (0.82, 0.20, 0.78),
    'cyan': (0.12, 0.78, 0.82),
}
TEXTURES = ('solid', 'hstriped', 'vstriped', 'checkered')
SHAPES = ('rectangle', 'ellipse', 'triangle', 'cross')

# Attribute vocabulary shared by the attribute-informed text bank and the
# seeded teacher
ATTRIBUTES = tuple(COLORS) + TEXTURES + SHAPES

BACKGROUND = 0.5
TEXTURE_PERIOD = 4
MAX_OBJECTS = 6
VAL_EVERY = 5

MANIFEST_FILE = 'manifest.json'
ANNOTATIONS_FILE = 'annotations.jsonl'
IMAGES_DIR = 'images'


def bucket_for(image_frequency: int) -> str:
    """
    Frequency bucket of a category appearing in @image_frequency images:
    1-10 rare, 11-100 common, more than 100 frequent.
    """
    if image_frequency < 1:
        raise InputError(f'Image frequency must be at least 1, got {image_frequency}')
    if image_frequency <= 10:
        return 'rare'
    if image_frequency <= 100:
        return 'common'
    return 'frequent'


def split_for(bucket: str) -> str:
    return 'novel' if bucket == 'rare' else 'base'


@dataclass
class CategorySpec:
    name: str
    color: str
    texture: str
    shape: str
    image_frequency: int
    bucket: str
    split: str

    @property
    def attributes(self) -> Tuple[str, str, str]:
        return (self.color, self.texture, self.shape)


@dataclass
class CorpusManifest:
    categories: List[CategorySpec]
    seed: int
    counts: Dict[str, int]
    zipf_exponent: float = 1.0
    image_size: Tuple[int, int] = (128, 128)

    def __post_init__(self):
        self._index = {c.name: c for c in self.categories}

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.categories]

    def names_in(self, split: str) -> List[str]:
        return [c.name for c in self.categories if c.split == split]

    def category(self, name: str) -> CategorySpec:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f'Category {name} is not in the corpus manifest') from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def to_dict(self) -> dict:
        return {
            'seed': self.seed,
            'zipf_exponent': self.zipf_exponent,
            'image_size': list(self.image_size),
            'counts': dict(self.counts),
            'categories': [c.__dict__ for c in self.categories],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CorpusManifest:
        return cls(
            categories=[CategorySpec(**c) for c in d['categories']],
            seed=int(d['seed']),
            counts={k: int(v) for k, v in d['counts'].items()},
            zipf_exponent=float(d.get('zipf_exponent', 1.0)),
            image_size=tuple(d.get('image_size', (128, 128))),
        )


@dataclass
class AnnotatedImage:
    """
    One image of the corpus: a (3, H, W) float array in [0, 1], half-open
    corner boxes (x1, y1, x2, y2) in pixels and one category name per box.
    """
    image_id: str
    image: np.ndarray
    boxes: np.ndarray
    labels: List[str]
    split: str = 'train'

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def categories(self) -> List[str]:
        """
        Distinct categories in first-appearance order.
        """
        return list(dict.fromkeys(self.labels))

    def with_labels(self, keep: Sequence[str]) -> AnnotatedImage:
        """
        A copy keeping only objects whose label is in @keep.
        """
        keep = set(keep)
        mask = np.array([l in keep for l in self.labels], dtype=bool)
        return AnnotatedImage(
            self.image_id, self.image, self.boxes.reshape(-1, 4)[mask],
            [l for l in self.labels if l in keep], self.split,
        )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if shape == 'rectangle':
        return np.ones((h, w), dtype=bool)
    if shape == 'ellipse':
        cx, cy, rx, ry = w / 2, h / 2, w / 2, h / 2
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if shape == 'triangle':
        return np.abs(xs - w / 2) <= (ys / h) * (w / 2)
    if shape == 'cross':
        return (np.abs(xs - w / 2) <= w / 6) | (np.abs(ys - h / 2) <= h / 6)
    raise InputError(f'Unknown shape {shape}')


def _texture_mask(texture: str, h: int, w: int) -> np.ndarray:
    """
    True where the texture shows the fill color, False where it shows the
    darkened fill.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    half = TEXTURE_PERIOD // 2
    if texture == 'solid':
        return np.ones((h, w), dtype=bool)
    if texture == 'hstriped':
        return (ys // half) % 2 == 0
    if texture == 'vstriped':
        return (xs // half) % 2 == 0
    if texture == 'checkered':
        return ((xs // half) + (ys // half)) % 2 == 0
    raise InputError(f'Unknown texture {texture}')


def render_object(canvas: np.ndarray, box: Sequence[int], spec: CategorySpec) -> None:
    """
    Paint the object of category @spec into @canvas ((3, H, W), in place).
    """
    x1, y1, x2, y2 = (int(v) for v in box)
    h, w = y2 - y1, x2 - x1
    mask = _shape_mask(spec.shape, h, w)
    tex = _texture_mask(spec.texture, h, w)
    color = np.asarray(COLORS[spec.color], dtype=np.float64)
    fill = np.where(tex[None], color[:, None, None], 0.45 * color[:, None, None])
    region = canvas[:, y1:y2, x1:x2]
    canvas[:, y1:y2, x1:x2] = np.where(mask[None], fill, region)


def _box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _place_boxes(rng: np.random.Generator, n: int, height: int, width: int) -> List[Tuple[int, int, int, int]]:
    short = min(height, width)
    lo, hi = max(8, int(0.1 * short)), max(9, int(0.45 * short))
    boxes = []
    for _ in range(n):
        for attempt in range(20):
            side = rng.integers(lo, hi + 1)
            aspect = rng.uniform(0.6, 1.6)
            w = int(min(width, max(4, round(side * math.sqrt(aspect)))))
            h = int(min(height, max(4, round(side / math.sqrt(aspect)))))
            x1 = int(rng.integers(0, width - w + 1))
            y1 = int(rng.integers(0, height - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(_box_iou(box, b) < 0.3 for b in boxes) or attempt == 19:
                break
        boxes.append(box)
    return boxes


def render_image(seed: int, index: int, specs: Sequence[CategorySpec],
                 image_size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render image @index holding one object per entry of @specs. Pixels are
    quantized to 8 bits so the in-memory image equals its PNG.
    """
    rng = rng_for(seed, 'image', index)
    height, width = image_size
    canvas = BACKGROUND + rng.uniform(-0.04, 0.04, size=(1, height, width))
    canvas = np.repeat(canvas, 3, axis=0)
    boxes = _place_boxes(rng, len(specs), height, width)
    for box, spec in zip(boxes, specs):
        render_object(canvas, box, spec)
    pixels = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    return pixels.astype(np.float32) / 255.0, np.asarray(boxes, dtype=np.float32).reshape(-1, 4)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def zipf_frequencies(n_categories: int, n_images: int, zipf_exponent: float) -> List[int]:
    """
    Target image frequency of each category rank: round(head * r^-s) with a
    head of a third of the images.
    """
    head = n_images / 3.0
    return [
        int(min(n_images, max(1, round(head * r ** (-zipf_exponent)))))
        for r in range(1, n_categories + 1)
    ]


def _appearances(seed: int, n_categories: int) -> List[Tuple[str, str, str]]:
    combos = list(itertools.product(COLORS, TEXTURES, SHAPES))
    if n_categories > len(combos):
        raise GenerationError(f'At most {len(combos)} distinct appearances, asked for {n_categories}')
    order = rng_for(seed, 'appearance').permutation(len(combos))
    return [combos[i] for i in order[:n_categories]]


def generate_dataset(seed: int, n_categories: int, n_images: int, zipf_exponent: float,
                     image_size: Tuple[int, int] = (128, 128)) -> Tuple[CorpusManifest, List[AnnotatedImage]]:
    """
    Generate a deterministic long-tail detection corpus. Category image
    frequencies follow a Zipf law over rank; every image holds 1-6 objects.
    """
    if n_categories < 3:
        raise GenerationError(f'Need at least 3 categories, got {n_categories}')
    if n_images < n_categories:
        raise GenerationError(f'Need at least as many images ({n_images}) as categories ({n_categories})')

    appearances = _appearances(seed, n_categories)
    targets = zipf_frequencies(n_categories, n_images, zipf_exponent)
    if sum(targets) > MAX_OBJECTS * n_images:
        raise GenerationError('Zipf targets exceed the per-image object capacity')

    # Tail first, each category onto the least crowded images
    rng = rng_for(seed, 'assign')
    image_cats: List[List[int]] = [[] for _ in range(n_images)]
    for rank in reversed(range(n_categories)):
        order = rng.permutation(n_images)
        load = np.array([len(image_cats[i]) for i in order])
        order = order[np.argsort(load, kind='stable')]
        picked = [i for i in order if len(image_cats[i]) < MAX_OBJECTS][:targets[rank]]
        for i in picked:
            image_cats[i].append(rank)
    for cats in image_cats:
        if not cats:
            cats.append(0)

    frequencies = [0] * n_categories
    for cats in image_cats:
        for c in set(cats):
            frequencies[c] += 1

    categories = []
    for rank, (color, texture, shape) in enumerate(appearances):
        bucket = bucket_for(frequencies[rank])
        categories.append(CategorySpec(
            name=f'{color}_{texture}_{shape}', color=color, texture=texture, shape=shape,
            image_frequency=frequencies[rank], bucket=bucket, split=split_for(bucket),
        ))

    buckets = {c.bucket for c in categories}
    missing = {'rare', 'common', 'frequent'} - buckets
    if missing:
        raise GenerationError(
            f'Frequencies {frequencies} do not realize the bucket(s) {", ".join(sorted(missing))}; '
            'adjust zipf_exponent, n_images or n_categories'
        )

    images = []
    for idx, cats in enumerate(image_cats):
        inst_rng = rng_for(seed, 'instances', idx)
        objects = list(cats)
        while len(objects) < MAX_OBJECTS and inst_rng.random() < 0.25:
            objects.append(cats[int(inst_rng.integers(len(cats)))])
        specs = [categories[c] for c in objects]
        pixels, boxes = render_image(seed, idx, specs, image_size)
        split = 'val' if idx % VAL_EVERY == VAL_EVERY - 1 else 'train'
        images.append(AnnotatedImage(f'{idx:06d}', pixels, boxes, [s.name for s in specs], split))

    counts = {
        'train': sum(1 for im in images if im.split == 'train'),
        'val': sum(1 for im in images if im.split == 'val'),
    }
    manifest = CorpusManifest(categories, seed, counts, zipf_exponent, tuple(image_size))
    logger.info(
        f'Generated {n_images} images over {n_categories} categories '
        f'({sum(c.bucket == "rare" for c in categories)} rare, '
        f'{sum(c.bucket == "common" for c in categories)} common, '
        f'{sum(c.bucket == "frequent" for c in categories)} frequent)'
    )
    return manifest, images


# ---------------------------------------------------------------------------
# Annotation I/O
# ---------------------------------------------------------------------------

def write_corpus(out_dir: str, manifest: CorpusManifest, images: Sequence[AnnotatedImage]) -> None:
    """
    Write @images as PNGs plus a JSON-lines annotation file and the manifest.
    """
    os.makedirs(os.path.join(out_dir, IMAGES_DIR), exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST_FILE), 'w+') as f:
        json.dump(manifest.to_dict(), f, indent=2)
    with open(os.path.join(out_dir, ANNOTATIONS_FILE), 'w+') as f:
        for im in images:
            rel = os.path.join(IMAGES_DIR, f'{im.image_id}.png')
            pixels = np.round(im.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(out_dir, rel), format='PNG')
            record = {
                'image_id': im.image_id,
                'path': rel,
                'split': im.split,
                'boxes': [[float(v) for v in b] for b in im.boxes],
                'labels': list(im.labels),
            }
            f.write(json.dumps(record) + '\n')
    logger.info(f'Wrote {len(images)} images to {out_dir}')


def read_manifest(corpus_dir: str) -> CorpusManifest:
    path = os.path.join(corpus_dir, MANIFEST_FILE)
    assert_exists(path)
    with open(path, 'r') as f:
        return CorpusManifest.from_dict(json.load(f))


def read_corpus(corpus_dir: str, split: Optional[str] = None) -> Tuple[CorpusManifest, List[AnnotatedImage]]:
    """
    Read a corpus written by write_corpus(), optionally only one @split.
    """
    manifest = read_manifest(corpus_dir)
    images = []
    with open(os.path.join(corpus_dir, ANNOTATIONS_FILE), 'r') as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if split is not None and rec['split'] != split:
                continue
            with Image.open(os.path.join(corpus_dir, rec['path'])) as pil:
                pixels = np.asarray(pil.convert('RGB'), dtype=np.uint8)
            for label in rec['labels']:
                if label not in manifest:
                    raise InputError(f'Image {rec["image_id"]} references unknown category {label}')
            images.append(AnnotatedImage(
                rec['image_id'],
                pixels.transpose(2, 0, 1).astype(np.float32) / 255.0,
                np.asarray(rec['boxes'], dtype=np.float32).reshape(-1, 4),
                list(rec['labels']),
                rec['split'],
            ))
    logger.debug(f'Read {len(images)} images from {corpus_dir}')
    return manifest, images


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------

def normalize_pixels(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)[:, None, None]
    std = np.asarray(std, dtype=np.float32)[:, None, None]
    return (image - mean) / std


def _resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image))[None]
    t = F.interpolate(t, size=(height, width), mode='bilinear', align_corners=False)
    return t[0].numpy()


def _valid_boxes(boxes: np.ndarray, labels: List[str], height: int, width: int) -> Tuple[np.ndarray, List[str]]:
    boxes = boxes.copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return boxes[keep], [l for l, k in zip(labels, keep) if k]


def apply_augmentation(img: AnnotatedImage, rng: np.random.Generator, policy: AugmentationPolicy,
                       normalize: bool = True) -> AnnotatedImage:
    """
    Flip, resize, optionally crop and normalize @img. The same number of
    random draws is consumed whatever the outcome of each step.
    """
    policy.validate()
    image = img.image
    boxes = img.boxes.astype(np.float32).reshape(-1, 4).copy()
    labels = list(img.labels)
    _, height, width = image.shape

    if rng.random() < policy.flip_prob:
        image = image[:, :, ::-1]
        boxes = np.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], axis=1)

    long_edge, short_edge = policy.sizes[int(rng.integers(len(policy.sizes)))]
    scale = min(long_edge / max(height, width), short_edge / min(height, width))
    new_h, new_w = int(round(height * scale)), int(round(width * scale))
    if (new_h, new_w) != (height, width):
        image = _resize(image, new_h, new_w)
        boxes = boxes * np.array([new_w / width, new_h / height, new_w / width, new_h / height], dtype=np.float32)
        height, width = new_h, new_w

    if policy.crop_fraction is not None:
        frac_h, frac_w = rng.uniform(policy.crop_fraction, 1.0, size=2)
        crop_h = max(1, math.ceil(frac_h * height))
        crop_w = max(1, math.ceil(frac_w * width))
        y0 = int(rng.integers(0, height - crop_h + 1))
        x0 = int(rng.integers(0, width - crop_w + 1))
        image = image[:, y0:y0 + crop_h, x0:x0 + crop_w]
        boxes = boxes - np.array([x0, y0, x0, y0], dtype=np.float32)
        height, width = crop_h, crop_w

    boxes, labels = _valid_boxes(boxes, labels, height, width)
    image = np.ascontiguousarray(image, dtype=np.float32)
    if normalize:
        image = normalize_pixels(image, policy.pixel_mean, policy.pixel_std)
    return AnnotatedImage(img.image_id, image, boxes.astype(np.float32), labels, img.split)


@dataclass
class Batch:
    """
    A zero-padded, normalized image batch. @raw keeps the unnormalized,
    unpadded images for the teacher.
    """
    images: torch.Tensor
    raw: List[np.ndarray]
    boxes: List[np.ndarray]
    labels: List[List[str]]
    image_ids: List[str]
    sizes: List[Tuple[int, int]] = field(default_factory=list)


def collate(images: Sequence[AnnotatedImage], policy: AugmentationPolicy, divisor: int = 32) -> Batch:
    """
    Normalize and pad @images to a common size, rounded up to a multiple of
    @divisor.
    """
    if not images:
        raise InputError('Cannot collate an empty batch')
    max_h = max(im.height for im in images)
    max_w = max(im.width for im in images)
    pad_h = int(math.ceil(max_h / divisor) * divisor)
    pad_w = int(math.ceil(max_w / divisor) * divisor)
    batch = torch.zeros((len(images), 3, pad_h, pad_w), dtype=torch.float32)
    for i, im in enumerate(images):
        norm = normalize_pixels(im.image, policy.pixel_mean, policy.pixel_std)
        batch[i, :, :im.height, :im.width] = torch.from_numpy(np.ascontiguousarray(norm))
    return Batch(
        images=batch,
        raw=[im.image for im in images],
        boxes=[im.boxes for im in images],
        labels=[list(im.labels) for im in images],
        image_ids=[im.image_id for im in images],
        sizes=[(im.height, im.width) for im in images],
    )


# ---------------------------------------------------------------------------
# Repeat-factor sampling
# ---------------------------------------------------------------------------

def category_repeat_factors(manifest: CorpusManifest, images: Sequence[AnnotatedImage],
                            threshold: float) -> Tuple[Dict[str, float], List[str]]:
    """
    r(c) = max(1, sqrt(t / f(c))) with f(c) the fraction of @images holding
    c. Returns the factors and the manifest categories absent from @images.
    """
    if not 0.0 < threshold < 1.0:
        raise InputError(f'Repeat threshold must be in (0, 1), got {threshold}')
    if not images:
        raise InputError('Cannot compute repeat factors over an empty image set')
    counts = {name: 0 for name in manifest.names}
    for im in images:
        for name in im.categories:
            counts[name] = counts.get(name, 0) + 1
    factors, excluded = {}, []
    for name, n in counts.items():
        if n == 0:
            excluded.append(name)
            continue
        f = n / len(images)
        factors[name] = max(1.0, math.sqrt(threshold / f))
    if excluded:
        logger.warning(f'Excluded {len(excluded)} categories absent from the training split: {", ".join(excluded)}')
    return factors, excluded


def compute_repeat_factors(manifest: CorpusManifest, images: Sequence[AnnotatedImage],
                           threshold: float = 0.001) -> Dict[str, float]:
    """
    Per-image repeat factor: the maximum category factor over the image's
    categories (1 for an image without objects).
    """
    factors, _ = category_repeat_factors(manifest, images, threshold)
    return {
        im.image_id: max([factors[c] for c in im.categories], default=1.0)
        for im in images
    }


def sample_epoch_indices(repeat_factors: Dict[str, float], rng: np.random.Generator) -> List[str]:
    """
    Each image appears floor(r) times plus once more with probability
    frac(r); the result is shuffled with @rng.
    """
    ids = []
    for image_id, r in repeat_factors.items():
        if r < 1.0:
            raise InputError(f'Repeat factor of {image_id} is below 1 ({r})')
        whole = int(math.floor(r))
        extra = 1 if rng.random() < (r - whole) else 0
        ids.extend([image_id] * (whole + extra))
    order = rng.permutation(len(ids))
    return [ids[i] for i in order]
