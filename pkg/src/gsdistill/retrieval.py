"""Caption-based asset retrieval over a local catalog.

The catalog is a JSONL file, one entry per line:

    {"path": "assets/lion.ply", "caption": "a ceramic lion"}
    {"path": "...", "caption": "...", "embedding": "<base64 LE float32>"}

Entries without a precomputed embedding fall back to the built-in hashed
bag-of-words text embedding; all embeddings in one catalog must share a
dimension.  Retrieval is the cosine argmax with lowest-index tie-breaking.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .embedding import EMBED_DIM, cosine, embed
from .errors import ConfigError


@dataclass
class CatalogEntry:
    path: str
    caption: str
    embedding: np.ndarray
    index: int = 0

    def __post_init__(self):
        if not self.caption:
            raise ConfigError(f"catalog entry {self.index} has an empty caption")
        norm = np.linalg.norm(self.embedding)
        if norm > 0:
            self.embedding = self.embedding / norm


@dataclass
class Catalog:
    entries: List[CatalogEntry]
    backend: str = "hashed-bow"

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("catalog must contain at least one entry")
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) != 1:
            raise ConfigError(f"catalog embeddings disagree on dimension: {dims}")

    def __len__(self) -> int:
        return len(self.entries)


def _decode_embedding(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise ConfigError(f"bad base64 embedding: {exc}") from exc
    if len(raw) % 4 != 0:
        raise ConfigError("embedding byte length is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def encode_embedding(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def load_catalog(path: str) -> Catalog:
    if not os.path.exists(path):
        raise ConfigError(f"catalog file not found: {path}")
    entries: List[CatalogEntry] = []
    external = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("path", "caption"):
                if key not in rec:
                    raise ConfigError(f"{path}:{lineno}: missing '{key}'")
            if "embedding" in rec and rec["embedding"]:
                vec = _decode_embedding(rec["embedding"])
                external = True
            else:
                vec = embed(rec["caption"])
            entries.append(CatalogEntry(rec["path"], rec["caption"], vec,
                                        index=len(entries)))
    return Catalog(entries, backend="external" if external else "hashed-bow")


def save_catalog(path: str, catalog: Catalog) -> None:
    with open(path, "w") as fh:
        for e in catalog.entries:
            fh.write(json.dumps({"path": e.path, "caption": e.caption}) + "\n")


@dataclass
class RetrievalResult:
    entry: CatalogEntry
    ranking: List[Tuple[int, float]] = field(default_factory=list)
    # ranking: (catalog index, similarity), best first


def retrieve(prompt: str, catalog: Catalog,
             prompt_embedding: Optional[np.ndarray] = None) -> RetrievalResult:
    """Pick the catalog entry with the highest cosine similarity to the
    prompt; ties go to the lowest catalog index."""
    if prompt_embedding is None:
        prompt_embedding = embed(prompt)
    dim = catalog.entries[0].embedding.shape[0]
    if prompt_embedding.shape != (dim,):
        raise ConfigError(f"prompt embedding dimension {prompt_embedding.shape} "
                          f"does not match catalog dimension ({dim},)")
    sims = [cosine(prompt_embedding, e.embedding) for e in catalog.entries]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    ranking = [(i, sims[i]) for i in order]
    return RetrievalResult(catalog.entries[order[0]], ranking)
