"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os
import random
import hashlib
import logging
from typing import Iterable, Optional, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)


class GridClipError(Exception):
    """
    Base class for every error raised by gridclip.
    """


class ConfigError(GridClipError, ValueError):
    """
    An experiment, augmentation or template configuration is invalid.
    """


class InputError(GridClipError, ValueError):
    """
    A tensor or file handed to gridclip has the wrong shape or content.
    """


class GenerationError(GridClipError):
    """
    The synthetic corpus cannot be generated with the requested parameters.
    """


class BankError(GridClipError, ValueError):
    """
    An embedding bank is malformed or an operation on it is illegal.
    """


class DegenerateEnsembleError(BankError):
    """
    The mean of the per-prompt vectors is the zero vector.
    """


class TargetError(GridClipError, KeyError):
    """
    A ground-truth label cannot be mapped onto the embedding bank.
    """


class TeacherLookupError(GridClipError, KeyError):
    """
    The file-backed teacher has no embedding for an image id.
    """


class NonFiniteLossError(GridClipError, FloatingPointError):
    """
    A loss component is NaN or infinite. @component names it.
    """
    def __init__(self, component: str, value: float):
        self.component = component
        self.value = value
        super().__init__(f'Loss component {component} is not finite ({value})')


def project_path(pathname: str) -> str:
    """
    Get path to a file from the root directory of this project.
    """
    return os.path.realpath(
        os.path.join(os.path.dirname(__file__), '..', pathname)
    )


def assert_exists(f: str) -> None:
    """
    Raise a FileNotFoundError if file @f does not exist.
    """
    if f is None or not os.path.exists(f):
        raise FileNotFoundError(f'Unable to find {f}')


def derive_seed(seed: int, *keys: Union[str, int]) -> int:
    """
    Derive a 64-bit seed from @seed and an arbitrary key path, e.g. an image
    index or a prompt string. Independent streams for independent keys.
    """
    h = hashlib.blake2b(digest_size=8, key=str(int(seed)).encode('utf-8'))
    for k in keys:
        h.update(str(k).encode('utf-8'))
        h.update(b'\x00')
    return int.from_bytes(h.digest(), 'little')


def rng_for(seed: int, *keys: Union[str, int]) -> np.random.Generator:
    """
    A numpy generator seeded from derive_seed(@seed, *@keys).
    """
    return np.random.default_rng(derive_seed(seed, *keys))


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """
    Seed python, numpy and torch. With @deterministic, ask torch for
    deterministic kernels and a single intra-op thread.
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def hash_arrays(arrays: Iterable[Union[np.ndarray, torch.Tensor]],
                names: Optional[Iterable[str]] = None) -> str:
    """
    A sha256 over the raw bytes (and optional names) of @arrays.
    """
    h = hashlib.sha256()
    names = list(names) if names is not None else None
    for i, a in enumerate(arrays):
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().contiguous().numpy()
        if names is not None:
            h.update(names[i].encode('utf-8'))
        h.update(str(a.dtype).encode('utf-8'))
        h.update(str(a.shape).encode('utf-8'))
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def hash_module(module: torch.nn.Module) -> str:
    """
    Hash every parameter and buffer of @module.
    """
    state = module.state_dict()
    return hash_arrays(state.values(), state.keys())
