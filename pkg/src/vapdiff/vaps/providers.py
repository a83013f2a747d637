"""Text embedding providers.

Both bundled providers are hash based and need no model weights.
``hash`` maps every distinct string to an unrelated random direction;
``bow`` sums hashed random vectors of the word unigrams and bigrams, so
descriptions that share attributes land close together.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    provider_id: str
    text_hash: str


class TextProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def _seeded_vector(key: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


class HashProvider:
    def __init__(self, dim: int = 64):
        self.dim = dim
        self.provider_id = f"hash-{dim}"

    def embed(self, text: str) -> np.ndarray:
        return _seeded_vector(text, self.dim)


class BagOfWordsProvider:
    _token = re.compile(r"[a-z0-9]+")

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.provider_id = f"bow-{dim}"

    def embed(self, text: str) -> np.ndarray:
        words = self._token.findall(text.lower())
        keys = [f"w:{w}" for w in words] + [f"b:{a} {b}" for a, b in zip(words, words[1:])]
        if not keys:
            return _seeded_vector(text, self.dim)
        return np.sum([_seeded_vector(k, self.dim) for k in keys], axis=0)


PROVIDERS = {"hash": HashProvider, "bow": BagOfWordsProvider}


def get_provider(name: str, dim: int = 64) -> TextProvider:
    try:
        return PROVIDERS[name](dim)
    except KeyError:
        raise ValidationError(f"unknown text provider {name!r}; known: {sorted(PROVIDERS)}", field="text_provider") from None


def encode_description(text: str, provider: TextProvider) -> TextEmbedding:
    """Embed ``text`` and scale it to unit length."""
    if not text or not text.strip():
        raise ValidationError("description text is empty", field="text")
    vec = np.asarray(provider.embed(text), dtype=np.float64)
    if vec.shape != (provider.dim,) or not np.all(np.isfinite(vec)):
        raise ValidationError(f"provider {provider.provider_id} returned an invalid vector", field="text")
    vec = vec / np.linalg.norm(vec)
    return TextEmbedding(
        vector=vec,
        provider_id=provider.provider_id,
        text_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )
