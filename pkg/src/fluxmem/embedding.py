"""Tokenizer, reference hash embedder and cosine similarity."""

from __future__ import annotations

import re

import numpy as np

from .errors import DimensionMismatch
from .graph import DEFAULT_DIMENSION

_TOKEN_RE = re.compile(r"[^\W_]+")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOP_BIT = 1 << 63


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def embed(text: str, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    """Signed feature hashing of tokens, L2-normalized; empty text maps to zeros."""
    vec = np.zeros(dimension, dtype=np.float64)
    for token in tokenize(text):
        h = fnv1a_64(token.encode("utf-8"))
        vec[h % dimension] += -1.0 if h & _TOP_BIT else 1.0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return np.zeros(dimension, dtype=np.float64)
    return vec / norm


class HashEmbedder:
    """Deterministic embedder backed by :func:`embed`."""

    deterministic = True

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = embed(text, self.dimension)
            vec.setflags(write=False)
            if len(self._cache) < 65536:
                self._cache[text] = vec
        return vec

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        return [self(t) for t in texts]


def cosine(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]; 0.0 when either side is all-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine of shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    value = float(np.dot(a, b)) / (na * nb)
    return max(-1.0, min(1.0, value))
