"""Deterministic sentence embeddings via signed feature hashing.

Stands in for a pretrained sentence encoder. The contract the rest of the
system relies on: fixed width, unit L2 norm, identical text gives an
identical vector, and sentences sharing tokens score higher cosine than
disjoint ones. Pure functions, safe for concurrent use.
"""

from __future__ import annotations

import re

import numpy as np

EMBED_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class EmptyTextError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


def _fnv1a(data: str) -> int:
    h = _FNV_OFFSET
    for byte in data.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class SentenceEmbedding:
    """Unit-norm vector tied to the text it was hashed from."""

    __slots__ = ("vector", "source_text")

    def __init__(self, vector: np.ndarray, source_text: str):
        self.vector = vector
        self.source_text = source_text

    def __repr__(self) -> str:
        return f"SentenceEmbedding({self.source_text!r})"


def embed(text: str, dim: int = EMBED_DIM) -> SentenceEmbedding:
    """Hash a sentence into a unit vector.

    Tokens (lowercased alphanumeric runs) each add +/-1 at index
    fnv1a(token) mod dim, with the sign taken from the parity of
    fnv1a("#" + token); the bag is then L2-normalized. Token order is
    irrelevant by construction.
    """
    tokens = tokenize(text)
    if not tokens:
        raise EmptyTextError(f"no tokens in text: {text!r}")
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        idx = _fnv1a(token) % dim
        sign = 1.0 if _fnv1a("#" + token) % 2 == 0 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise EmptyTextError(f"tokens cancelled to a zero vector: {text!r}")
    return SentenceEmbedding(vec / norm, text)


def cosine(a: SentenceEmbedding, b: SentenceEmbedding) -> float:
    """Dot product of two unit vectors, clamped against rounding."""
    if a.vector.shape != b.vector.shape:
        raise DimensionMismatchError(
            f"embedding dims differ: {a.vector.shape} vs {b.vector.shape}")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


class CaptionVocabulary:
    """Ordered, unique caption strings with precomputed embeddings."""

    def __init__(self, captions: list[str], dim: int = EMBED_DIM):
        if len(set(captions)) != len(captions):
            raise ValueError("captions must be unique")
        self.captions = list(captions)
        self.dim = dim
        self._index = {c: i for i, c in enumerate(self.captions)}
        self.embeddings = np.stack([embed(c, dim).vector for c in self.captions])

    def __len__(self) -> int:
        return len(self.captions)

    def __contains__(self, caption: str) -> bool:
        return caption in self._index

    def index_of(self, caption: str) -> int:
        return self._index[caption]

    def caption_at(self, index: int) -> str:
        return self.captions[index]

    def embedding_at(self, index: int) -> np.ndarray:
        return self.embeddings[index]

    def nearest(self, embedding: SentenceEmbedding) -> tuple[int, float]:
        """Index and cosine of the closest caption."""
        sims = self.embeddings @ embedding.vector
        idx = int(np.argmax(sims))
        return idx, float(np.clip(sims[idx], -1.0, 1.0))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for caption in self.captions:
                f.write(caption + "\n")

    @classmethod
    def load(cls, path, dim: int = EMBED_DIM) -> "CaptionVocabulary":
        with open(path, encoding="utf-8") as f:
            captions = [line.rstrip("\n") for line in f if line.strip()]
        return cls(captions, dim)
