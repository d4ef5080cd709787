"""Transcript embeddings.

Two interchangeable fixed encoders share one contract (a 768-d vector per
transcript): a hashed bag-of-words toy encoder for hermetic runs, and an
HTTP client for an external sentence-embedding service with an on-disk
cache. ``WordBagFeaturizer`` feeds the trainable word-bag ablation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

logger = logging.getLogger(__name__)

EMBED_DIM = 768


class TextEncoderUnavailable(RuntimeError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    vector: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in ("toy", "external"):
            raise ValueError("source must be 'toy' or 'external'")
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", v)


def _tokens(text: str) -> list[str]:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")
    return text.split()


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class ToyTextEncoder:
    """Average of per-token pseudo-random unit vectors, renormalized."""

    source = "toy"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def encode(self, text: str) -> TextEmbedding:
        vecs = np.stack([_token_vector(tok, self.dim) for tok in _tokens(text)])
        mean = vecs.mean(axis=0)
        return TextEmbedding(mean / np.linalg.norm(mean), "toy")

    def __call__(self, text: str) -> np.ndarray:
        return self.encode(text).vector


def encode_toy(text: str, dim: int = EMBED_DIM) -> TextEmbedding:
    return ToyTextEncoder(dim).encode(text)


class ExternalTextEncoder:
    """Client for ``POST {endpoint}`` with body ``{"text": ...}`` returning ``{"embedding": [...]}``.

    Responses are cached as ``<cache_dir>/<sha256(text)>.json``; cache hits
    never touch the network.
    """

    source = "external"

    def __init__(self, endpoint: str, cache_dir=None, dim: int = EMBED_DIM, timeout: float = 30.0):
        self.endpoint = endpoint
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.dim = dim
        self.timeout = timeout

    def _cache_path(self, text: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{hashlib.sha256(text.encode('utf-8')).hexdigest()}.json"

    def _check(self, payload) -> np.ndarray:
        emb = payload.get("embedding") if isinstance(payload, dict) else None
        if not isinstance(emb, list):
            raise ProtocolError("response lacks an 'embedding' list")
        vec = np.asarray(emb, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ProtocolError(f"expected a {self.dim}-d embedding, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ProtocolError("embedding contains non-finite values")
        return vec

    def _store(self, path: Path, vec: np.ndarray) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump({"embedding": vec.tolist()}, fh)
        os.replace(tmp, path)

    def encode(self, text: str) -> TextEmbedding:
        _tokens(text)
        cached = self._cache_path(text)
        if cached is not None and cached.exists():
            return TextEmbedding(self._check(json.loads(cached.read_text())), "external")
        try:
            resp = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise TextEncoderUnavailable(f"embedding service at {self.endpoint} failed: {exc}") from exc
        vec = self._check(payload)
        if cached is not None:
            self._store(cached, vec)
        return TextEmbedding(vec, "external")

    def __call__(self, text: str) -> np.ndarray:
        return self.encode(text).vector


def encode_external(text: str, endpoint: str, cache=None, dim: int = EMBED_DIM) -> TextEmbedding:
    return ExternalTextEncoder(endpoint, cache, dim).encode(text)


class WordBagFeaturizer:
    """Normalized histogram of hashed token buckets; a trainable projection turns it into an embedding."""

    def __init__(self, buckets: int = 2048):
        self.buckets = buckets

    def __call__(self, text: str) -> np.ndarray:
        out = np.zeros(self.buckets)
        toks = _tokens(text)
        for tok in toks:
            out[int(hashlib.sha256(tok.encode("utf-8")).hexdigest(), 16) % self.buckets] += 1.0
        return out / len(toks)


def make_text_encoder(kind: str = "toy", **kw):
    if kind == "toy":
        return ToyTextEncoder(kw.get("dim", EMBED_DIM))
    if kind == "external":
        return ExternalTextEncoder(kw["endpoint"], kw.get("cache_dir"), kw.get("dim", EMBED_DIM))
    if kind == "wordbag":
        return WordBagFeaturizer(kw.get("buckets", 2048))
    raise ValueError(f"unknown text encoder {kind!r}")
