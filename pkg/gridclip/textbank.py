"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from __future__ import annotations
import json
import struct
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from gridclip.data import ATTRIBUTES, CorpusManifest
from gridclip.utils import BankError, ConfigError, DegenerateEnsembleError, hash_arrays, rng_for

logger = logging.getLogger(__name__)

PLACEHOLDER = '{}'
NORM_TOLERANCE = 1e-6
BANK_FORMAT_VERSION = 1

# Weight of the per-prompt hash perturbation in attribute mode
ATTRIBUTE_PROMPT_NOISE = 0.05


class EmbeddingBank:
    """
    An ordered, immutable map of category name -> unit-norm embedding, with
    a base/novel flag per category.
    """
    def __init__(self, names: Sequence[str], vectors: Union[np.ndarray, torch.Tensor],
                 split: Optional[Sequence[str]] = None, provenance: str = 'synthetic'):
        if isinstance(vectors, torch.Tensor):
            vectors = vectors.detach().cpu().numpy()
        vectors = np.array(vectors, dtype=np.float32, copy=True)
        names = list(names)
        if vectors.ndim != 2 or vectors.shape[0] != len(names):
            raise BankError(f'Expected a ({len(names)}, D) matrix, got shape {vectors.shape}')
        if not names:
            raise BankError('An embedding bank needs at least one category')
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise BankError(f'Duplicate category names: {", ".join(dupes)}')
        split = list(split) if split is not None else ['base'] * len(names)
        if len(split) != len(names) or any(s not in ('base', 'novel') for s in split):
            raise BankError('split needs one "base" or "novel" flag per category')
        if provenance not in ('synthetic', 'file'):
            raise BankError(f'Unknown provenance {provenance}')

        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(norms == 0):
            raise BankError('Bank rows must be non-zero')
        off = np.abs(norms - 1.0) > NORM_TOLERANCE
        if np.any(off):
            vectors[off] = (vectors[off].astype(np.float64) / norms[off, None]).astype(np.float32)
        vectors.setflags(write=False)

        self._names = names
        self._vectors = vectors
        self._split = split
        self._provenance = provenance
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> List[str]:
        return list(self._names)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def split(self) -> List[str]:
        return list(self._split)

    @property
    def provenance(self) -> str:
        return self._provenance

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f'Category {name} is not in the embedding bank') from None

    def tensor(self, device: Union[str, torch.device] = 'cpu', dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self._vectors, device=device, dtype=dtype)

    def names_in(self, split: str) -> List[str]:
        return [n for n, s in zip(self._names, self._split) if s == split]

    def subset(self, split: str) -> EmbeddingBank:
        idx = [i for i, s in enumerate(self._split) if s == split]
        if not idx:
            raise BankError(f'Bank has no {split} categories')
        return EmbeddingBank([self._names[i] for i in idx], self._vectors[idx],
                             [split] * len(idx), self._provenance)

    def content_hash(self) -> str:
        return hash_arrays([self._vectors, np.frombuffer('\x00'.join(self._names).encode('utf-8'), dtype=np.uint8)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingBank):
            return NotImplemented
        return (self._names == other._names and self._split == other._split
                and self._vectors.tobytes() == other._vectors.tobytes())

    def __repr__(self) -> str:
        return f'EmbeddingBank(K={len(self)}, dim={self.dim}, provenance={self._provenance})'


def build_prompts(category: str, templates: Sequence[str]) -> List[str]:
    """
    Substitute @category into every template.
    """
    prompts = []
    for t in templates:
        if t.count(PLACEHOLDER) != 1:
            raise ConfigError(f'Template {t!r} must contain exactly one {PLACEHOLDER} placeholder')
        prompts.append(t.replace(PLACEHOLDER, category))
    return prompts


def ensemble_embeddings(per_prompt_vectors: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """
    Average the per-prompt vectors and L2-normalize the mean.
    """
    v = np.asarray(per_prompt_vectors.detach().cpu().numpy() if isinstance(per_prompt_vectors, torch.Tensor)
                   else per_prompt_vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise BankError(f'Expected a non-empty (M, D) matrix, got shape {v.shape}')
    if np.any(np.linalg.norm(v, axis=1) == 0):
        raise BankError('Per-prompt vectors must be non-zero')
    mean = v.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateEnsembleError('The prompt ensemble averages to the zero vector')
    return mean / norm


def attribute_basis(seed: int, dim: int) -> np.ndarray:
    """
    A fixed (dim, len(ATTRIBUTES)) matrix of attribute directions. Shared by
    the attribute-informed text embeddings and the seeded teacher.
    """
    rng = rng_for(seed, 'attribute-basis', dim)
    return rng.standard_normal((dim, len(ATTRIBUTES))) / np.sqrt(dim)


def attribute_code(attributes: Sequence[str]) -> np.ndarray:
    code = np.zeros(len(ATTRIBUTES))
    for a in attributes:
        try:
            code[ATTRIBUTES.index(a)] = 1.0
        except ValueError:
            raise BankError(f'Unknown attribute {a}') from None
    return code


def synth_category_embed(text: str, seed: int, embed_dim: int,
                         attributes: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    A deterministic unit vector for @text. Hash mode draws it from a keyed
    hash of (@seed, @text). Attribute mode returns the normalized attribute
    combination plus a small per-text perturbation.
    """
    if not text:
        raise BankError('Cannot embed an empty category name')
    v = rng_for(seed, 'prompt', text).standard_normal(embed_dim)
    v /= np.linalg.norm(v)
    if attributes is not None:
        a = attribute_basis(seed, embed_dim) @ attribute_code(attributes)
        v = a / np.linalg.norm(a) + ATTRIBUTE_PROMPT_NOISE * v
        v /= np.linalg.norm(v)
    return v


def build_bank(names: Sequence[str], templates: Sequence[str], seed: int, embed_dim: int,
               split: Optional[Sequence[str]] = None, mode: str = 'hash',
               attributes: Optional[Dict[str, Sequence[str]]] = None) -> EmbeddingBank:
    """
    Prompt every category with @templates, embed each prompt synthetically
    and ensemble the prompts into T_k.
    """
    if mode not in ('hash', 'attribute'):
        raise ConfigError(f'Unknown text mode {mode}')
    if mode == 'attribute' and attributes is None:
        raise ConfigError('Attribute mode needs the attributes of every category')
    rows = []
    for name in names:
        prompts = build_prompts(name, templates) or [name]
        attrs = attributes[name] if mode == 'attribute' else None
        rows.append(ensemble_embeddings(np.stack([
            synth_category_embed(p, seed, embed_dim, attrs) for p in prompts
        ])))
    logger.debug(f'Built a {mode} bank of {len(rows)} categories at dim {embed_dim}')
    return EmbeddingBank(names, np.stack(rows), split, 'synthetic')


def bank_from_manifest(manifest: CorpusManifest, templates: Sequence[str], seed: int, embed_dim: int,
                       mode: str = 'hash', split: Optional[str] = None) -> EmbeddingBank:
    """
    Build the bank of the corpus categories, or of one @split of them.
    """
    cats = [c for c in manifest.categories if split is None or c.split == split]
    if not cats:
        raise BankError(f'The manifest has no {split} categories')
    return build_bank(
        [c.name for c in cats], templates, seed, embed_dim,
        split=[c.split for c in cats], mode=mode,
        attributes={c.name: c.attributes for c in cats},
    )


def extend_bank_open_set(base: EmbeddingBank, novel_names: Sequence[str],
                         novel_vectors: Union[np.ndarray, torch.Tensor, None] = None) -> EmbeddingBank:
    """
    Append novel categories to @base. Base rows are kept bitwise.
    """
    novel_names = list(novel_names)
    if not novel_names:
        return base
    if novel_vectors is None:
        raise BankError('Novel categories need their embedding vectors')
    if isinstance(novel_vectors, torch.Tensor):
        novel_vectors = novel_vectors.detach().cpu().numpy()
    novel = EmbeddingBank(novel_names, novel_vectors, ['novel'] * len(novel_names), base.provenance)
    clash = [n for n in novel_names if n in base]
    if clash:
        raise BankError(f'Novel categories collide with base categories: {", ".join(clash)}')
    if novel.dim != base.dim:
        raise BankError(f'Novel embeddings have dim {novel.dim}, bank has {base.dim}')
    return EmbeddingBank(
        base.names + novel.names,
        np.concatenate([base.vectors, novel.vectors], axis=0),
        base.split + novel.split,
        base.provenance,
    )


def save_bank(bank: EmbeddingBank, path: str) -> None:
    """
    Layout: u32 little-endian header length, JSON header, then a
    little-endian float32 (K, D) matrix.
    """
    header = json.dumps({
        'format_version': BANK_FORMAT_VERSION,
        'names': bank.names,
        'dim': bank.dim,
        'split': bank.split,
        'provenance': bank.provenance,
    }).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(struct.pack('<I', len(header)))
        f.write(header)
        f.write(bank.vectors.astype('<f4').tobytes())


def load_bank(path: str) -> EmbeddingBank:
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 4:
        raise BankError(f'{path} is too short to be an embedding bank')
    (hlen,) = struct.unpack('<I', raw[:4])
    try:
        header = json.loads(raw[4:4 + hlen].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BankError(f'Corrupt bank header in {path}: {e}') from None
    names, dim = header['names'], int(header['dim'])
    body = raw[4 + hlen:]
    if len(body) != 4 * dim * len(names):
        raise BankError(f'{path} holds {len(body)} matrix bytes, expected {4 * dim * len(names)}')
    vectors = np.frombuffer(body, dtype='<f4').reshape(len(names), dim).astype(np.float32)
    return EmbeddingBank(names, vectors, header.get('split'), header.get('provenance', 'file'))
