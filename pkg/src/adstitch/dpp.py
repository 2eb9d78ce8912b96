"""Diverse subset selection with greedy k-DPP MAP inference."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import AdAsset, CatalogEntry, ValidationError, fold, tokenize


class HashingEmbedder:
    """Default text embedder: word unigrams and character trigrams hashed into
    ``dim`` signed buckets, then L2-normalised."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValidationError("dim must be positive")
        self.dim = dim
        self._cache: dict[str, tuple[int, float]] = {}

    def _bucket(self, feature: str) -> tuple[int, float]:
        hit = self._cache.get(feature)
        if hit is None:
            h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
            hit = (h % self.dim, 1.0 if (h >> 63) & 1 else -1.0)
            self._cache[feature] = hit
        return hit

    def features(self, text: str) -> list[str]:
        words = tokenize(text)
        padded = f" {fold(text)} "
        grams = [padded[i:i + 3] for i in range(len(padded) - 2)]
        return [f"w:{w}" for w in words] + [f"c:{g}" for g in grams]

    def __call__(self, text: str) -> np.ndarray:
        if not fold(text):
            raise ValidationError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for feat in self.features(text):
            idx, sign = self._bucket(feat)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # every feature cancelled out; fall back to a deterministic axis
            vec[self._bucket("fallback:" + fold(text))[0]] = 1.0
            return vec
        return vec / norm


_default_embedder: HashingEmbedder | None = None


def embed(text: str, dim: int = 256) -> np.ndarray:
    global _default_embedder
    if _default_embedder is None or _default_embedder.dim != dim:
        _default_embedder = HashingEmbedder(dim)
    return _default_embedder(text)


@dataclass(frozen=True)
class SimilarityKernel:
    L: np.ndarray
    jitter: float


def build_kernel(embeddings: Sequence[np.ndarray], jitter: float = 1e-6,
                 quality: Sequence[float] | None = None) -> SimilarityKernel:
    """Cosine-similarity Gram matrix with ``1 + jitter`` on the diagonal.

    ``quality`` optionally rescales rows and columns, ``diag(q) S diag(q)``.
    """
    if len(embeddings) == 0:
        raise ValidationError("need at least one embedding")
    dims = {np.shape(e) for e in embeddings}
    if len(dims) != 1:
        raise ValidationError(f"embedding dimension mismatch: {sorted(dims)}")
    E = np.vstack(embeddings).astype(float)
    L = E @ E.T
    L = 0.5 * (L + L.T)
    np.fill_diagonal(L, 1.0 + jitter)
    if quality is not None:
        q = np.asarray(quality, dtype=float)
        L = q[:, None] * L * q[None, :]
    return SimilarityKernel(L, jitter)


def kdpp_map_greedy(kernel: SimilarityKernel | np.ndarray, k: int, gain_floor: float = 1e-9,
                    return_gains: bool = False):
    """Greedy MAP selection of up to ``k`` items.

    Each step adds the item with the largest residual variance ``d_j^2`` (the
    determinant ratio of adding ``j``), maintained by incremental Cholesky
    updates in O(n) per item. Selection stops early once the best residual is
    at or below ``max(gain_floor, 10 * jitter)``: with a jittered diagonal an
    exact duplicate keeps a residual of about ``2 * jitter``. Ties go to the
    lowest index.
    """
    if isinstance(kernel, SimilarityKernel):
        L, jitter = kernel.L, kernel.jitter
    else:
        L, jitter = np.asarray(kernel, dtype=float), 0.0
    n = L.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must satisfy 1 <= k <= n (k={k}, n={n})")
    floor = max(gain_floor, 10.0 * jitter)

    cis = np.zeros((k, n))
    d2 = np.diag(L).astype(float).copy()
    selected: list[int] = []
    gains: list[float] = []
    alive = np.ones(n, dtype=bool)
    while len(selected) < k:
        masked = np.where(alive, d2, -np.inf)
        j = int(np.argmax(masked))
        if masked[j] <= floor:
            break
        selected.append(j)
        gains.append(float(masked[j]))
        alive[j] = False
        if len(selected) == k:
            break
        m = len(selected) - 1
        dj = math.sqrt(d2[j])
        e = (L[j, :] - cis[:m, j] @ cis[:m, :]) / dj
        cis[m, :] = e
        d2 -= e * e
    if return_gains:
        return selected, gains
    return selected


def select_assets(entry: CatalogEntry, T: int, D: int,
                  embedder: Callable[[str], np.ndarray] | None = None,
                  jitter: float = 1e-6, gain_floor: float = 1e-9) -> CatalogEntry:
    """Pick up to ``T`` diverse titles and ``D`` diverse descriptions."""
    if T < 1 or D < 1:
        raise ValidationError("T and D must be positive")
    embedder = embedder or HashingEmbedder()

    def pick(pool: Sequence[AdAsset], budget: int) -> tuple[AdAsset, ...]:
        if not pool:
            return ()
        kernel = build_kernel([embedder(a.text) for a in pool], jitter)
        idx = kdpp_map_greedy(kernel, min(budget, len(pool)), gain_floor)
        return tuple(pool[i] for i in idx)

    return CatalogEntry(pick(entry.titles, T), pick(entry.descriptions, D))


def select_catalog(catalog, T: int, D: int, embedder=None, jitter: float = 1e-6,
                   gain_floor: float = 1e-9):
    from .core import AssetCatalog

    embedder = embedder or HashingEmbedder()
    return AssetCatalog({url: select_assets(catalog[url], T, D, embedder, jitter, gain_floor)
                         for url in catalog})
