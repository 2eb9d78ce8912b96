"""Real-time ad stitching: per-position logistic regression over hashed sparse
features, Thompson-sampling exploration and greedy sequential slot filling.

Feature hashing
---------------
Raw feature keys are hashed with 64-bit BLAKE2b (little-endian digest). Cross
features combine two key hashes, and the position salt is mixed in last, all
through the SplitMix64 finalizer; the top ``hash_bits`` bits give the index.
Everything is unsigned 64-bit arithmetic, so indices are identical on every
platform.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .core import (
    POSITIONS,
    AdAsset,
    AssetKind,
    Position,
    Query,
    StitchedAd,
    ValidationError,
    fold,
    tokenize,
)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
LENGTH_BUCKETS = 30
DEFAULT_TRIAL_SCALE = 4.0


class Mode(str, enum.Enum):
    EXPLORE = "Explore"
    EXPLOIT = "Exploit"


# --------------------------------------------------------------------------
# hashing
# --------------------------------------------------------------------------

def h64(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def length_bucket(text: str) -> int:
    return min(len(text) // 5, LENGTH_BUCKETS - 1)


def asset_keys(text: str) -> tuple[list[str], list[str]]:
    """``(base keys, crossable gram keys)`` for an asset text.

    Base keys are the whole-text key, the length bucket, every distinct
    unigram and every distinct bigram; the unigram and bigram keys are also
    the ones crossed with query tokens.
    """
    toks = tokenize(text)
    grams = list(dict.fromkeys([f"u:{t}" for t in toks] +
                               [f"b:{a} {b}" for a, b in zip(toks, toks[1:])]))
    base = [f"t:{fold(text)}", f"l:{length_bucket(fold(text))}"] + grams
    return base, grams


def query_keys(query: Query) -> list[str]:
    return list(dict.fromkeys(f"q:{t}" for t in query.tokens))


def feature_keys(text: str, query: Query) -> list[str]:
    """Human-readable feature keys before hashing (for inspection and tests)."""
    base, grams = asset_keys(text)
    return base + [f"{g}|{q}" for g in grams for q in query_keys(query)]


def _cross(gram_hashes: np.ndarray, q_hashes: np.ndarray) -> np.ndarray:
    return mix64(gram_hashes[:, None] ^ mix64(q_hashes[None, :] + _GOLDEN)).ravel()


def salt_hash(salt: str) -> np.uint64:
    return np.uint64(h64(f"pos:{salt}"))


def index_of(key_hashes: np.ndarray, salt: str | np.uint64, hash_bits: int) -> np.ndarray:
    s = salt if isinstance(salt, np.uint64) else salt_hash(salt)
    return (mix64(key_hashes ^ s) >> np.uint64(64 - hash_bits)).astype(np.int64)


class FeatureCache:
    """Memoised key hashes for asset texts and queries."""

    def __init__(self, max_entries: int = 200_000):
        self.max_entries = max_entries
        self._assets: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._queries: dict[tuple[str, ...], np.ndarray] = {}
        self._keys: dict[tuple, np.ndarray] = {}

    def asset(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._assets.get(text)
        if hit is None:
            base, grams = asset_keys(text)
            hit = (np.array([h64(k) for k in base], dtype=np.uint64),
                   np.array([h64(k) for k in grams], dtype=np.uint64))
            if len(self._assets) >= self.max_entries:
                self._assets.clear()
            self._assets[text] = hit
        return hit

    def query(self, query: Query) -> np.ndarray:
        hit = self._queries.get(query.tokens)
        if hit is None:
            hit = np.array([h64(k) for k in query_keys(query)], dtype=np.uint64)
            if len(self._queries) >= self.max_entries:
                self._queries.clear()
            self._queries[query.tokens] = hit
        return hit

    def key_hashes(self, text: str, query: Query) -> np.ndarray:
        ck = (text, query.tokens)
        hit = self._keys.get(ck)
        if hit is None:
            base, grams = self.asset(text)
            q = self.query(query)
            hit = np.concatenate([base, _cross(grams, q)]) if len(grams) and len(q) else base
            if len(self._keys) >= self.max_entries:
                self._keys.clear()
            self._keys[ck] = hit
        return hit


_default_cache = FeatureCache()


@dataclass(frozen=True, eq=False)
class FeatureVector:
    indices: np.ndarray  # sorted, distinct int64
    hash_bits: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureVector) and self.hash_bits == other.hash_bits
                and np.array_equal(self.indices, other.indices))

    def __len__(self) -> int:
        return len(self.indices)


def featurize(asset: AdAsset, query: Query, position: Position | str, hash_bits: int,
              salt: str | None = None, cache: FeatureCache | None = None) -> FeatureVector:
    """Hashed binary features of ``asset`` in ``position`` for ``query``.

    ``salt`` overrides the position salt (the simulator uses this to give its
    click oracle a separate feature space).
    """
    if not 1 <= hash_bits <= 32:
        raise ValidationError("hash_bits must be in [1, 32]")
    cache = cache or _default_cache
    salt = salt if salt is not None else Position(position).value
    keys = cache.key_hashes(asset.text, query)
    return FeatureVector(np.unique(index_of(keys, salt, hash_bits)), hash_bits)


def batch_features(texts: Sequence[str], query: Query, salt: str, hash_bits: int,
                   cache: FeatureCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Features for many assets at once as ``(owner, index)`` arrays, deduplicated
    per owner and sorted by ``(owner, index)`` exactly as :func:`featurize` would."""
    cache = cache or _default_cache
    parts = [cache.key_hashes(t, query) for t in texts]
    sizes = np.fromiter((len(p) for p in parts), dtype=np.int64, count=len(parts))
    keys = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint64)
    idx = index_of(keys, salt, hash_bits)
    owner = np.repeat(np.arange(len(parts), dtype=np.int64), sizes)
    packed = np.unique((owner << 32) | idx)
    return packed >> 32, packed & 0xFFFFFFFF


def _sum_by_owner(owner: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    # single accumulation path so batch and per-vector scores agree bit for bit
    return np.bincount(owner, weights=values.astype(np.float64), minlength=n)


def logistic(z):
    return expit(np.asarray(z, dtype=np.float64))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PositionModel:
    """Logistic regression for one slot; weights and gradient sums are float32."""

    position: Position
    hash_bits: int
    weights: np.ndarray
    grad_sum: np.ndarray
    bias: float = 0.0
    updates_seen: int = 0

    @classmethod
    def fresh(cls, position: Position | str, hash_bits: int) -> "PositionModel":
        size = 1 << hash_bits
        return cls(Position(position), hash_bits, np.zeros(size, dtype=np.float32),
                   np.zeros(size, dtype=np.float32))

    def copy(self) -> "PositionModel":
        return PositionModel(self.position, self.hash_bits, self.weights.copy(),
                             self.grad_sum.copy(), self.bias, self.updates_seen)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PositionModel):
            return NotImplemented
        return (self.position == other.position and self.hash_bits == other.hash_bits
                and self.bias == other.bias and self.updates_seen == other.updates_seen
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.grad_sum, other.grad_sum))

    def _check(self, x: FeatureVector) -> np.ndarray:
        idx = x.indices
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.weights.shape[0]):
            raise ValidationError(f"feature index out of range for {self.hash_bits}-bit model")
        return idx


Models = Mapping[Position, PositionModel]


def fresh_models(hash_bits: int) -> dict[Position, PositionModel]:
    return {p: PositionModel.fresh(p, hash_bits) for p in POSITIONS}


def copy_models(models: Models) -> dict[Position, PositionModel]:
    return {p: m.copy() for p, m in models.items()}


def lr_score(model: PositionModel, x: FeatureVector) -> float:
    idx = model._check(x)
    z = model.bias + _sum_by_owner(np.zeros(len(idx), dtype=np.int64), model.weights[idx], 1)[0]
    return float(logistic(z))


def trial_count(model: PositionModel, x: FeatureVector, trial_scale: float = DEFAULT_TRIAL_SCALE) -> float:
    """Per-feature mean of cumulative |gradient|, times ``trial_scale``."""
    idx = model._check(x)
    total = _sum_by_owner(np.zeros(len(idx), dtype=np.int64), model.grad_sum[idx], 1)[0]
    return float(total / max(1, len(idx)) * trial_scale)


def thompson_sample(p: float, n: float, rng: np.random.Generator) -> float:
    """Draw from ``Beta(1 + p n, 1 + (1 - p) n)``."""
    return float(rng.beta(1.0 + p * n, 1.0 + (1.0 - p) * n))


@dataclass(frozen=True)
class TrainExample:
    features: FeatureVector
    label: int


def logistic_loss(bias: float, weights: np.ndarray, x: FeatureVector, label: int) -> float:
    """Log loss of one example, computed in float64."""
    z = float(bias) + float(np.sum(np.asarray(weights, dtype=np.float64)[x.indices]))
    # log(1 + e^z) - y z, stable for large |z|
    return float(np.logaddexp(0.0, z) - label * z)


def loss_gradient(bias: float, weights: np.ndarray, x: FeatureVector, label: int) -> float:
    """d loss / d z; equal to the derivative w.r.t. the bias and every active weight."""
    z = float(bias) + float(np.sum(np.asarray(weights, dtype=np.float64)[x.indices]))
    return float(logistic(z)) - label


def train_online(model: PositionModel, batch: Sequence[TrainExample],
                 learning_rate: float = 0.02) -> PositionModel:
    """Plain per-example SGD on log loss, in batch order. Updates ``model`` in
    place and returns it; copy first to keep a readable snapshot."""
    if not batch:
        raise ValidationError("empty training batch")
    for ex in batch:
        if ex.label not in (0, 1):
            raise ValidationError(f"non-binary label {ex.label!r}")
        model._check(ex.features)
    w, gs = model.weights, model.grad_sum
    lr = np.float32(learning_rate)
    bias = model.bias
    zero = np.zeros(0, dtype=np.int64)
    for ex in batch:
        idx = ex.features.indices
        if len(zero) != len(idx):
            zero = np.zeros(len(idx), dtype=np.int64)
        z = bias + _sum_by_owner(zero, w[idx], 1)[0]
        g = float(logistic(z)) - ex.label
        w[idx] -= lr * np.float32(g)
        gs[idx] += np.float32(abs(g))
        bias -= learning_rate * g
    model.bias = float(bias)
    model.updates_seen += len(batch)
    return model


@dataclass(frozen=True)
class JointExample:
    """One served ad: the feature vector of every filled slot and the ad's label."""

    features: Mapping[Position, FeatureVector]
    label: int


def train_joint(models: Models, batch: Sequence[JointExample],
                learning_rate: float = 0.02) -> Models:
    """Per-example SGD on one logistic model of the whole ad.

    The ad logit is the sum of the filled slots' logits (bias plus active
    weights), so each slot is credited only for its own contribution. Every
    filled slot receives the shared gradient ``g = p - label``; updates follow
    the same rules as :func:`train_online`.
    """
    if not batch:
        raise ValidationError("empty training batch")
    for ex in batch:
        if ex.label not in (0, 1):
            raise ValidationError(f"non-binary label {ex.label!r}")
        for pos, x in ex.features.items():
            models[pos]._check(x)
    lr = np.float32(learning_rate)
    biases = {p: models[p].bias for p in models}
    counts = {p: 0 for p in models}
    for ex in batch:
        z = 0.0
        for pos, x in ex.features.items():
            m = models[pos]
            z += biases[pos] + float(np.sum(m.weights[x.indices], dtype=np.float64))
        g = float(logistic(z)) - ex.label
        step, mag = lr * np.float32(g), np.float32(abs(g))
        for pos, x in ex.features.items():
            m = models[pos]
            m.weights[x.indices] -= step
            m.grad_sum[x.indices] += mag
            biases[pos] -= learning_rate * g
            counts[pos] += 1
    for pos, m in models.items():
        m.bias = float(biases[pos])
        m.updates_seen += counts[pos]
    return models


def batch_log_loss(model: PositionModel, examples: Iterable[TrainExample]) -> float:
    """Mean log loss on held-out examples (reporting only)."""
    losses = [logistic_loss(model.bias, model.weights, ex.features, ex.label) for ex in examples]
    if not losses:
        raise ValidationError("no examples")
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# stitching
# --------------------------------------------------------------------------

def count_options(T: int, D: int) -> int:
    if T < 1 or D < 1:
        raise ValidationError("T and D must be positive")
    return T + max(T - 1, 0) + max(T - 2, 0) + D + max(D - 1, 0)


@dataclass(frozen=True)
class StitchRequest:
    query: Query
    titles: tuple[AdAsset, ...]
    descriptions: tuple[AdAsset, ...]
    mode: Mode = Mode.EXPLOIT
    rng_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "titles", tuple(self.titles))
        object.__setattr__(self, "descriptions", tuple(self.descriptions))
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.query, str):
            object.__setattr__(self, "query", Query(self.query))


_KIND = {p: p.kind for p in POSITIONS}


class PreparedPools:
    """Title and description pools sorted by asset id, reusable across requests."""

    def __init__(self, titles: Sequence[AdAsset], descriptions: Sequence[AdAsset]):
        if not titles or not descriptions:
            raise NoAdError("empty title or description pool")
        t = sorted(titles, key=lambda a: a.id)
        d = sorted(descriptions, key=lambda a: a.id)
        self.by_kind = {AssetKind.TITLE: (t, tuple(a.id for a in t)),
                        AssetKind.DESCRIPTION: (d, tuple(a.id for a in d))}


class NoAdError(ValidationError):
    """Raised when a servable ad cannot be formed (an empty pool)."""


class Stitcher:
    """Scores and stitches against a fixed snapshot of the five position models.

    Per-snapshot score caches make repeated contexts cheap; call
    :meth:`invalidate` after mutating the models in place.
    """

    def __init__(self, models: Models, trial_scale: float = DEFAULT_TRIAL_SCALE,
                 cache: FeatureCache | None = None, score_cache_size: int = 50_000):
        missing = [p.value for p in POSITIONS if p not in models]
        if missing:
            raise ValidationError(f"missing position models: {', '.join(missing)}")
        bits = {m.hash_bits for m in models.values()}
        if len(bits) != 1:
            raise ValidationError("position models disagree on hash_bits")
        self.models = dict(models)
        self.hash_bits = bits.pop()
        self.trial_scale = trial_scale
        self.features = cache or FeatureCache()
        self._salts = {p: salt_hash(p.value) for p in POSITIONS}
        self._scores: dict = {}
        self._score_cache_size = score_cache_size

    def invalidate(self) -> None:
        self._scores.clear()

    def score_pool(self, assets: Sequence[AdAsset], query: Query, position: Position,
                   ids: tuple[str, ...] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``(p, n)`` arrays: LR probability and trial count for every asset."""
        key = (position, query.tokens, ids if ids is not None else tuple(a.id for a in assets))
        hit = self._scores.get(key)
        if hit is not None:
            return hit
        model = self.models[position]
        owner, idx = batch_features([a.text for a in assets], query, self._salts[position],
                                    self.hash_bits, self.features)
        k = len(assets)
        p = logistic(model.bias + _sum_by_owner(owner, model.weights[idx], k))
        gs = _sum_by_owner(owner, model.grad_sum[idx], k)
        counts = np.bincount(owner, minlength=k)
        n = gs / np.maximum(counts, 1) * self.trial_scale
        if len(self._scores) >= self._score_cache_size:
            self._scores.clear()
        self._scores[key] = (p, n)
        return p, n

    def stitch(self, req: StitchRequest, rng: np.random.Generator | None = None) -> StitchedAd:
        """Fill T1, T2, T3, D1, D2 greedily; ties go to the lowest asset id."""
        if not req.titles or not req.descriptions:
            raise NoAdError("empty title or description pool")
        return self.stitch_pools(req.query, PreparedPools(req.titles, req.descriptions), req.mode,
                                 rng if rng is not None or req.mode is Mode.EXPLOIT
                                 else np.random.default_rng(req.rng_seed))

    def stitch_pools(self, query: Query, pools: "PreparedPools", mode: Mode,
                     rng: np.random.Generator | None) -> StitchedAd:
        explore = mode is Mode.EXPLORE
        if explore and rng is None:
            raise ValidationError("explore mode needs a random generator")
        used = {AssetKind.TITLE: set(), AssetKind.DESCRIPTION: set()}
        chosen: dict[Position, AdAsset] = {}
        scores: list[float] = []
        evaluations = 0
        for pos in POSITIONS:
            kind = _KIND[pos]
            pool, ids = pools.by_kind[kind]
            taken = used[kind]
            remaining = [i for i in range(len(pool)) if i not in taken]
            if not remaining:
                continue
            p, n = self.score_pool(pool, query, pos, ids)
            if explore:
                pr, nr = p[remaining], n[remaining]
                draws = rng.beta(1.0 + pr * nr, 1.0 + (1.0 - pr) * nr)
                best = remaining[int(np.argmax(draws))]
            else:
                pl = p.tolist()
                best = max(remaining, key=pl.__getitem__)
            taken.add(best)
            evaluations += len(remaining)
            chosen[pos] = pool[best]
            scores.append(float(p[best]))
        return StitchedAd(title1=chosen[Position.T1], desc1=chosen[Position.D1],
                          title2=chosen.get(Position.T2), title3=chosen.get(Position.T3),
                          desc2=chosen.get(Position.D2), scores=tuple(scores),
                          evaluations=evaluations)

    def ad_score(self, ad: StitchedAd, query: Query) -> float:
        """Sum of per-position LR probabilities of a whole ad for ``query``."""
        total = 0.0
        for pos, asset in ad.items():
            p, _ = self.score_pool((asset,), query, pos)
            total += float(p[0])
        return total


def stitch(models: Models | Stitcher, req: StitchRequest,
           rng: np.random.Generator | None = None) -> StitchedAd:
    engine = models if isinstance(models, Stitcher) else Stitcher(models)
    return engine.stitch(req, rng)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"ADSTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValidationError):
    pass


def save_models(models: Models, path: str | Path) -> None:
    """Write a checkpoint: header, position table, then float32 LE arrays and a CRC32.

    The file is written to a temporary name and renamed into place.
    """
    ordered = [models[p] for p in POSITIONS if p in models]
    if not ordered:
        raise CheckpointError("no models to save")
    bits = ordered[0].hash_bits
    if any(m.hash_bits != bits for m in ordered):
        raise CheckpointError("models disagree on hash_bits")
    chunks = [MAGIC, struct.pack("<III", FORMAT_VERSION, bits, len(ordered))]
    for m in ordered:
        name = m.position.value.encode("ascii")
        chunks.append(struct.pack("<B", len(name)) + name + struct.pack("<Qd", m.updates_seen, m.bias))
    for m in ordered:
        chunks.append(m.weights.astype("<f4", copy=False).tobytes())
        chunks.append(m.grad_sum.astype("<f4", copy=False).tobytes())
    crc = 0
    for c in chunks:
        crc = zlib.crc32(c, crc)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def load_models(path: str | Path) -> dict[Position, PositionModel]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    off = 0

    def take(n: int, section: str) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"checkpoint truncated in section '{section}'")
        out = view[off:off + n]
        off += n
        return out

    if bytes(take(len(MAGIC), "header")) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic in section 'header')")
    version, bits, count = struct.unpack("<III", take(12, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} in section 'header'")
    if not 1 <= bits <= 32 or not 1 <= count <= len(POSITIONS):
        raise CheckpointError("corrupt values in section 'header'")
    table = []
    for _ in range(count):
        (ln,) = struct.unpack("<B", take(1, "position table"))
        name = bytes(take(ln, "position table")).decode("ascii", "replace")
        try:
            pos = Position(name)
        except ValueError:
            raise CheckpointError(f"unknown position {name!r} in section 'position table'") from None
        seen, bias = struct.unpack("<Qd", take(16, "position table"))
        table.append((pos, seen, bias))
    size = 1 << bits
    models = {}
    for pos, seen, bias in table:
        w = np.frombuffer(take(4 * size, f"weights[{pos.value}]"), dtype="<f4").astype(np.float32)
        g = np.frombuffer(take(4 * size, f"grad_sum[{pos.value}]"), dtype="<f4").astype(np.float32)
        models[pos] = PositionModel(pos, bits, w, g, bias, seen)
    (crc,) = struct.unpack("<I", take(4, "checksum"))
    if off != len(view):
        raise CheckpointError("trailing bytes after section 'checksum'")
    if zlib.crc32(view[:off - 4]) != crc:
        raise CheckpointError("checksum mismatch in section 'checksum'")
    return models
