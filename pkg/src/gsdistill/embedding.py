"""Hashed bag-of-words text embedding.

Default embedding backend for caption retrieval and view-tagged prompts.
Tokens are lowercased alphanumeric runs hashed (md5, platform independent)
into a fixed number of buckets; the count vector is L2-normalized.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter

import numpy as np

from .errors import ConfigError

EMBED_DIM = 1024

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dim: int = EMBED_DIM) -> int:
    digest = hashlib.md5(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % dim


def embed(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Embed text as an L2-normalized hashed token-count vector.

    Raises ConfigError on empty text (no tokens).
    """
    tokens = tokenize(text)
    if not tokens:
        raise ConfigError(f"cannot embed empty text: {text!r}")
    vec = np.zeros(dim, dtype=np.float64)
    for tok, count in Counter(tokens).items():
        vec[token_bucket(tok, dim)] += count
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))
