"""Species and caption condition providers.

The hash providers are deterministic stand-ins for pretrained encoders. Anything that
offers ``species_embed(name)`` / ``text_features(caption)`` plus a ``dim`` attribute can
replace them; precomputed encoder outputs load through the ``UMEB`` sidecar.
"""
import hashlib
import logging
import string
import struct
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from errors import (
    ContainerError,
    InvalidInputError,
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnknownSpeciesError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64
MAX_WORDS = 32
SIDECAR_MAGIC = b'UMEB'
SIDECAR_VERSION = 1


@dataclass(frozen=True, eq=False)
class SpeciesEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ShapeMismatchError(f'species embedding must be a vector, got shape {vector.shape}')
        if not np.all(np.isfinite(vector)):
            raise InvalidInputError('species embedding must be finite')
        object.__setattr__(self, 'vector', vector)

    @property
    def dim(self):
        return self.vector.shape[0]


@dataclass(frozen=True, eq=False)
class TextFeatures:
    """Sentence vector ``(d,)`` and word matrix ``(n_w, d)``.

    Stub providers hand out numpy arrays; the learned null condition hands out its
    parameters directly so gradients reach them.
    """
    sentence: object
    words: object

    def __post_init__(self):
        sentence_shape = tuple(self.sentence.shape)
        words_shape = tuple(self.words.shape)
        if len(sentence_shape) != 1:
            raise ShapeMismatchError(f'sentence feature must be a vector, got {sentence_shape}')
        if len(words_shape) != 2 or words_shape[1] != sentence_shape[0] or words_shape[0] < 1:
            raise ShapeMismatchError(f'word features must be (n_w >= 1, {sentence_shape[0]}), got {words_shape}')

    @property
    def dim(self):
        return self.sentence.shape[0]

    @property
    def num_words(self):
        return self.words.shape[0]

    def tokens(self, dtype=torch.float32):
        """``[s; W]`` as one ``(1 + n_w, d)`` tensor."""
        sentence = torch.as_tensor(self.sentence, dtype=dtype)
        words = torch.as_tensor(self.words, dtype=dtype)
        return torch.cat([sentence.unsqueeze(0), words], dim=0)


@runtime_checkable
class SpeciesProvider(Protocol):
    dim: int

    def species_embed(self, name: str) -> SpeciesEmbedding:
        ...


@runtime_checkable
class TextProvider(Protocol):
    dim: int

    def text_features(self, caption: str) -> TextFeatures:
        ...


def canonical_species_name(name):
    canonical = (name or '').strip().lower()
    if not canonical:
        raise InvalidInputError('species name must be non-empty')
    return canonical


def tokenize(caption, max_words=MAX_WORDS):
    if caption is None or not caption.strip():
        raise InvalidInputError('caption must be non-empty')
    tokens = []
    for raw in caption.lower().split():
        stripped = raw.strip(string.punctuation)
        tokens.append(stripped or raw)
    return tokens[:max_words]


def _hashed_unit_vector(key, dim):
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
    vector = rng.standard_normal(dim)
    return vector / np.linalg.norm(vector)


class HashSpeciesProvider:
    def __init__(self, seed=0, dim=DEFAULT_DIM):
        self.seed = seed
        self.dim = dim

    def species_embed(self, name):
        canonical = canonical_species_name(name)
        return SpeciesEmbedding(_hashed_unit_vector(f'species:{self.seed}:{canonical}', self.dim))


class HashTextProvider:
    def __init__(self, seed=0, dim=DEFAULT_DIM, max_words=MAX_WORDS):
        self.seed = seed
        self.dim = dim
        self.max_words = max_words

    def word_vector(self, token):
        return _hashed_unit_vector(f'word:{self.seed}:{token}', self.dim)

    def text_features(self, caption):
        words = np.stack([self.word_vector(t) for t in tokenize(caption, self.max_words)])
        mean = words.mean(axis=0)
        norm = np.linalg.norm(mean)
        sentence = mean / norm if norm > 0 else mean
        return TextFeatures(sentence, words)


class NullTextCondition(nn.Module):
    """Learned unconditional text tokens used for condition dropout and CFG."""

    def __init__(self, dim=DEFAULT_DIM):
        super().__init__()
        self.sentence = nn.Parameter(0.02 * torch.randn(dim))
        self.words = nn.Parameter(0.02 * torch.randn(1, dim))

    def null_text_features(self):
        return TextFeatures(self.sentence, self.words)


# --- sidecar ---------------------------------------------------------------------------

def write_sidecar(path, entries):
    """Write ``key -> (rows, dim)`` float arrays; keys are stored sorted."""
    parts = [SIDECAR_MAGIC, struct.pack('<II', SIDECAR_VERSION, len(entries))]
    for key in sorted(entries):
        matrix = np.atleast_2d(np.asarray(entries[key], dtype='<f4'))
        data = key.encode('utf-8')
        parts.append(struct.pack('<I', len(data)) + data)
        parts.append(struct.pack('<II', *matrix.shape))
        parts.append(np.ascontiguousarray(matrix).tobytes())
    with open(path, 'wb') as f:
        f.write(b''.join(parts))


def read_sidecar(path):
    with open(path, 'rb') as f:
        data = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedPayloadError(f'sidecar truncated at byte {pos}')
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(4)
    if magic != SIDECAR_MAGIC:
        raise MagicMismatchError(f'expected magic {SIDECAR_MAGIC!r}, got {magic!r}')
    version, count = struct.unpack('<II', take(8))
    if version != SIDECAR_VERSION:
        raise VersionMismatchError(f'unsupported sidecar version {version}')
    entries = {}
    for _ in range(count):
        (key_len,) = struct.unpack('<I', take(4))
        raw = take(key_len)
        try:
            key = raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise ContainerError(f'invalid UTF-8 in sidecar key at byte {pos - key_len}') from e
        rows, dim = struct.unpack('<II', take(8))
        entries[key] = np.frombuffer(take(4 * rows * dim), dtype='<f4').astype(np.float64).reshape(rows, dim)
    if pos != len(data):
        raise ContainerError(f'{len(data) - pos} trailing bytes in sidecar')
    return entries


class SidecarSpeciesProvider:
    """Precomputed species vectors keyed by lower-cased species name (one row each)."""

    def __init__(self, entries):
        self.entries = {canonical_species_name(k): np.asarray(v, dtype=np.float64)[0] for k, v in entries.items()}
        dims = {v.shape[0] for v in self.entries.values()}
        if len(dims) != 1:
            raise ShapeMismatchError(f'sidecar species vectors disagree on width: {sorted(dims)}')
        self.dim = dims.pop()

    @classmethod
    def from_file(cls, path):
        return cls(read_sidecar(path))

    def species_embed(self, name):
        canonical = canonical_species_name(name)
        if canonical not in self.entries:
            raise UnknownSpeciesError(f'no sidecar embedding for species {name!r}')
        vector = self.entries[canonical]
        return SpeciesEmbedding(vector / np.linalg.norm(vector))


class SidecarTextProvider:
    """Precomputed caption features; row 0 is the sentence vector, the rest are words."""

    def __init__(self, entries):
        self.entries = {k.strip(): np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        for key, matrix in self.entries.items():
            if matrix.shape[0] < 2:
                raise ShapeMismatchError(f'caption {key!r} needs a sentence row and at least one word row')
        dims = {v.shape[1] for v in self.entries.values()}
        if len(dims) != 1:
            raise ShapeMismatchError(f'sidecar text features disagree on width: {sorted(dims)}')
        self.dim = dims.pop()

    @classmethod
    def from_file(cls, path):
        return cls(read_sidecar(path))

    def text_features(self, caption):
        if caption is None or not caption.strip():
            raise InvalidInputError('caption must be non-empty')
        key = caption.strip()
        if key not in self.entries:
            raise InvalidInputError(f'no sidecar features for caption {caption!r}')
        matrix = self.entries[key]
        return TextFeatures(matrix[0], matrix[1:1 + MAX_WORDS])
