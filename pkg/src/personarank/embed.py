"""Deterministic stand-in for a frozen cross-encoder.

Any callable ``(query_text, doc_text) -> vector`` satisfies the embedding
provider contract; :func:`toy_embed` is the hermetic default. It hashes
character 3-grams of ``query + SEP + doc`` into ``d`` signed buckets and
scales by ``1/sqrt(d)``. Text is treated as opaque unicode, no
normalisation or tokenisation.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DataError

SEPARATOR = "␟"  # stands in for the [SEP] token between query and document
NGRAM = 3

EmbeddingProvider = Callable[[str, str], np.ndarray]


def _bucket(gram: str, d: int, seed: int) -> tuple[int, float]:
    h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, salt=seed.to_bytes(8, "little", signed=True))
    value = int.from_bytes(h.digest(), "little")
    return value % d, (1.0 if (value >> 63) & 1 else -1.0)


def toy_embed(query_text: str, doc_text: str, d: int, seed: int = 0) -> np.ndarray:
    if d < 2:
        raise DataError(f"embedding dimension must be >= 2, got {d}")
    if not query_text or not doc_text:
        raise DataError("query and document text must be non-empty")
    text = query_text + SEPARATOR + doc_text
    vec = np.zeros(d, dtype=np.float64)
    first = None
    for i in range(len(text) - NGRAM + 1):
        idx, sign = _bucket(text[i : i + NGRAM], d, seed)
        if first is None:
            first = idx
        vec[idx] += sign
    if not vec.any():
        # every bucket cancelled; keep the output non-degenerate
        vec[first] = 1.0
    return vec / np.sqrt(d)


def toy_provider(d: int, seed: int = 0) -> EmbeddingProvider:
    def provider(query_text: str, doc_text: str) -> np.ndarray:
        return toy_embed(query_text, doc_text, d, seed)

    return provider
