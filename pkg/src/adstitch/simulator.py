"""Synthetic serving environment for training and evaluating stitching policies.

A :class:`World` draws (page, query) traffic, decides auction wins and clicks
with logistic oracles that live in the stitcher's own hashed feature space,
and turns clicks into revenue. :func:`simulate` runs a policy against it and
optionally trains the policy online.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import norm

from .core import (
    POSITIONS,
    AdAsset,
    AssetCatalog,
    AssetKind,
    AssetSource,
    CatalogEntry,
    LandingPage,
    Position,
    Query,
    StitchedAd,
    ValidationError,
    tokenize,
)
from .ingestion import asset_id
from .stitcher import (
    DEFAULT_TRIAL_SCALE,
    FeatureCache,
    FeatureVector,
    JointExample,
    Mode,
    Models,
    PreparedPools,
    Stitcher,
    StitchRequest,
    TrainExample,
    batch_features,
    copy_models,
    featurize,
    logistic,
    salt_hash,
    train_joint,
    train_online,
)

CLICK_SALT = "click:"


# --------------------------------------------------------------------------
# world
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldSpec:
    """Parameters of a synthetic world; loadable from a flat JSON object."""

    seed: int = 0
    n_pages: int = 2
    titles_per_page: int = 15
    descs_per_page: int = 10
    queries_per_page: int = 10
    hash_bits: int = 18
    oracle_sparsity: float = 0.5
    oracle_scale: float = 0.12
    win_scale: float = 1.0
    win_bias: float = 0.0
    win_weight: float = 1.0  # multiplier on the feature part of the win logit
    click_bias: float = -2.0
    revenue_per_click: float = 0.5
    quick_back_base: float = 0.05
    quick_back_bias: float = 0.25
    violation_rate: float = 0.0
    hidden_scale: float = 0.0  # > 0 adds click-logit terms outside the feature space

    @classmethod
    def from_file(cls, path: str | Path) -> "WorldSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"{path}: unknown world fields {sorted(unknown)}")
        return cls(**data)

    def to_record(self) -> dict:
        return asdict(self)


class World:
    """Pages, their asset pools, a query distribution and the hidden oracles.

    ``oracle_theta`` is a dense vector over the ``2**hash_bits`` feature space.
    Auction wins use the stitcher's position salts; clicks use the same keys
    under a separate ``click:`` salt, so both are representable by the
    stitcher's model class.
    """

    def __init__(self, pages: Sequence[LandingPage], catalog: AssetCatalog,
                 queries: Mapping[str, Sequence[Query]], oracle_theta: np.ndarray, *,
                 hash_bits: int, seed: int = 0, page_weights: Sequence[float] | None = None,
                 win_scale: float = 1.0, win_bias: float = 0.0, click_bias: float = -2.0,
                 revenue_per_click: float = 0.5, quick_back_base: float = 0.05,
                 quick_back_bias: float = 0.25, flagged: frozenset[str] = frozenset(),
                 hidden_scale: float = 0.0, win_weight: float = 1.0):
        if not 0.0 < win_scale <= 1.0:
            raise ValidationError("win_scale must be in (0, 1]")
        if revenue_per_click <= 0:
            raise ValidationError("revenue_per_click must be positive")
        if oracle_theta.shape != (1 << hash_bits,):
            raise ValidationError("oracle_theta does not match hash_bits")
        self.pages = list(pages)
        self.catalog = catalog
        self.urls = [p.url for p in self.pages]
        missing = [u for u in self.urls if u not in catalog]
        if missing:
            raise ValidationError(f"catalog has no entry for {missing[0]}")
        self.queries = {u: list(queries.get(u, ())) for u in self.urls}
        if any(not qs for qs in self.queries.values()):
            raise ValidationError("every page needs at least one query")
        w = np.ones(len(self.urls)) if page_weights is None else np.asarray(page_weights, float)
        self.page_weights = w / w.sum()
        self.oracle_theta = oracle_theta
        self.oracle_theta.setflags(write=False)
        self.hash_bits = hash_bits
        self.seed = seed
        self.win_scale = win_scale
        self.win_bias = win_bias
        self.click_bias = click_bias
        self.revenue_per_click = revenue_per_click
        self.quick_back_base = quick_back_base
        self.quick_back_bias = quick_back_bias
        self.flagged = frozenset(flagged)
        self.hidden_scale = hidden_scale
        self.win_weight = win_weight
        self.features = FeatureCache()
        self._train_features: dict = {}
        self._win_salts = {p: salt_hash(p.value) for p in POSITIONS}
        self._click_salts = {p: salt_hash(CLICK_SALT + p.value) for p in POSITIONS}
        self._slot_logits: dict = {}
        self._ad_probs: dict = {}

    # -- traffic ----------------------------------------------------------

    def contexts(self) -> list[tuple[int, int, float]]:
        """All ``(page index, query index, probability)`` traffic contexts."""
        out = []
        for pi, url in enumerate(self.urls):
            qs = self.queries[url]
            for qi in range(len(qs)):
                out.append((pi, qi, float(self.page_weights[pi]) / len(qs)))
        return out

    def entry(self, page_index: int) -> CatalogEntry:
        return self.catalog[self.urls[page_index]]

    def query(self, page_index: int, query_index: int) -> Query:
        return self.queries[self.urls[page_index]][query_index]

    # -- oracles ----------------------------------------------------------

    def slot_logits(self, pool: Sequence[AdAsset], query: Query, position: Position,
                    click: bool) -> np.ndarray:
        """Oracle logit contribution of every asset in ``pool`` placed at ``position``."""
        key = (click, position, query.tokens, tuple(a.id for a in pool))
        hit = self._slot_logits.get(key)
        if hit is None:
            salts = self._click_salts if click else self._win_salts
            owner, idx = batch_features([a.text for a in pool], query, salts[position],
                                        self.hash_bits, self.features)
            hit = np.bincount(owner, weights=self.oracle_theta[idx], minlength=len(pool))
            if click and self.hidden_scale > 0:
                hit = hit + self.hidden_scale * np.array([self._hidden(a, query, position) for a in pool])
            self._slot_logits[key] = hit
        return hit

    def _hidden(self, asset: AdAsset, query: Query, position: Position) -> float:
        from .stitcher import h64

        u = (h64(f"hidden:{self.seed}:{asset.id}:{position.value}:{' '.join(query.tokens)}") >> 11) / float(1 << 53)
        return float(norm.ppf(min(max(u, 1e-12), 1 - 1e-12)))

    def ad_probabilities(self, ad: StitchedAd, query: Query) -> tuple[float, float, float]:
        """``(win, click given shown, quick-back given click)`` for an ad and query."""
        key = (query.tokens, ad.key())
        hit = self._ad_probs.get(key)
        if hit is None:
            zw, zc = self.win_bias, self.click_bias
            n_flagged = 0
            for pos, asset in ad.items():
                if self.win_weight:
                    zw += self.win_weight * float(self.slot_logits((asset,), query, pos, click=False)[0])
                zc += float(self.slot_logits((asset,), query, pos, click=True)[0])
                n_flagged += asset.id in self.flagged
            qb = min(1.0, self.quick_back_base + self.quick_back_bias * n_flagged)
            hit = (self.win_scale * float(logistic(zw)), float(logistic(zc)), qb)
            self._ad_probs[key] = hit
        return hit

    def best_ad(self, page_index: int, query_index: int) -> StitchedAd | None:
        """Stitch with the highest click probability for a context, found exactly
        by assignment over the additive per-slot oracle logits."""
        entry = self.entry(page_index)
        if not entry.titles or not entry.descriptions:
            return None
        q = self.query(page_index, query_index)
        chosen: dict[Position, AdAsset] = {}
        for kind, positions in ((AssetKind.TITLE, POSITIONS[:3]), (AssetKind.DESCRIPTION, POSITIONS[3:])):
            pool = sorted(entry.titles if kind is AssetKind.TITLE else entry.descriptions, key=lambda a: a.id)
            used = positions[:min(len(positions), len(pool))]
            gain = np.vstack([self.slot_logits(pool, q, p, click=True) for p in used])
            rows, cols = linear_sum_assignment(gain, maximize=True)
            for r, c in zip(rows, cols):
                chosen[used[r]] = pool[c]
        return StitchedAd(title1=chosen[Position.T1], desc1=chosen[Position.D1],
                          title2=chosen.get(Position.T2), title3=chosen.get(Position.T3),
                          desc2=chosen.get(Position.D2))

    def training_features(self, asset: AdAsset, query: Query, position: Position) -> FeatureVector:
        key = (asset.id, query.tokens, position)
        hit = self._train_features.get(key)
        if hit is None:
            if len(self._train_features) > 500_000:
                self._train_features.clear()
            hit = featurize(asset, query, position, self.hash_bits, cache=self.features)
            self._train_features[key] = hit
        return hit


# --------------------------------------------------------------------------
# synthetic worlds
# --------------------------------------------------------------------------

_GENERIC = ("buy", "shop", "sale", "official", "best", "new", "deals", "online", "store",
            "quality", "save", "today", "top", "great", "fast", "easy")
_SYLLABLES = ("ka", "lo", "mi", "ra", "ven", "tor", "sa", "pe", "lin", "qua", "do", "ber",
              "zen", "ti", "mar", "ol", "fi", "nex", "cu", "ro")


def _word(rng: np.random.Generator) -> str:
    return "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))


def _phrase(rng, topic, n_words, limit, taken):
    for _ in range(200):
        words = [str(w) for w in rng.choice(topic, size=n_words, replace=False)]
        k = int(rng.integers(0, 2))
        for _ in range(k):
            words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(_GENERIC)))
        text = " ".join(words).capitalize()
        if len(text) <= limit and text.lower() not in taken:
            taken.add(text.lower())
            return text
        n_words = max(1, n_words - 1) if len(text) > limit else n_words
    raise ValidationError("could not generate a unique phrase; enlarge the topic vocabulary")


def synthetic_world(spec: WorldSpec = WorldSpec(), *, max_title_chars: int = 30,
                    max_desc_chars: int = 90) -> World:
    """Build a reproducible synthetic world from ``spec``.

    With ``violation_rate > 0`` that fraction of assets gets an unsupported
    "Free Shipping" claim and is flagged for elevated quick-back.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x57A7]))
    pages, assets, queries = [], [], {}
    flagged: set[str] = set()
    for pi in range(spec.n_pages):
        topic = list(dict.fromkeys(_word(rng) for _ in range(40)))[:16]
        brand = _word(rng)
        url = f"https://www.{brand}{pi}.com/{topic[0]}"
        taken: set[str] = set()
        titles = [_phrase(rng, topic, int(rng.integers(2, 4)), max_title_chars, taken)
                  for _ in range(spec.titles_per_page)]
        descs = [_phrase(rng, topic, int(rng.integers(5, 8)), max_desc_chars, taken) + "."
                 for _ in range(spec.descs_per_page)]
        page = LandingPage.build(url, page_title=titles[0], visual_headings=titles[1:3],
                                 body_snippets=descs[:2], extra_text=" ".join(titles + descs))
        pages.append(page)
        for kind, texts in ((AssetKind.TITLE, titles), (AssetKind.DESCRIPTION, descs)):
            for i, text in enumerate(texts):
                if spec.violation_rate > 0 and rng.random() < spec.violation_rate:
                    suffix = " Free Shipping" if kind is AssetKind.TITLE else " Free Shipping on all orders."
                    text = text.rstrip(".") + suffix
                    aid = asset_id(url, kind, i, text, "sim")
                    flagged.add(aid)
                else:
                    aid = asset_id(url, kind, i, text, "sim")
                assets.append(AdAsset(aid, url, kind, text, AssetSource.GENERATED))
        qs, seen = [], set()
        while len(qs) < spec.queries_per_page:
            k = int(rng.integers(1, 4))
            q = Query(" ".join(str(w) for w in rng.choice(topic, size=k, replace=False)))
            if q.tokens not in seen:
                seen.add(q.tokens)
                qs.append(q)
        queries[url] = qs

    size = 1 << spec.hash_bits
    theta = rng.normal(0.0, spec.oracle_scale, size)
    theta[rng.random(size) >= spec.oracle_sparsity] = 0.0
    catalog = AssetCatalog.from_assets(assets, [p.url for p in pages])
    return World(pages, catalog, queries, theta, hash_bits=spec.hash_bits, seed=spec.seed,
                 win_scale=spec.win_scale, win_bias=spec.win_bias, click_bias=spec.click_bias,
                 revenue_per_click=spec.revenue_per_click, quick_back_base=spec.quick_back_base,
                 quick_back_bias=spec.quick_back_bias, flagged=frozenset(flagged),
                 hidden_scale=spec.hidden_scale, win_weight=spec.win_weight)


def world_from_catalog(pages: Sequence[LandingPage], catalog: AssetCatalog, spec: WorldSpec,
                       flagged: frozenset[str] = frozenset()) -> World:
    """World over real pages and assets; queries are sampled from page tokens."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC47A]))
    queries = {}
    for page in pages:
        vocab = sorted(set(tokenize(" ".join([page.page_title, *page.visual_headings]))) or
                       set(tokenize(page.full_text)) or {"ad"})
        qs, seen = [], set()
        for _ in range(spec.queries_per_page * 20):
            if len(qs) >= spec.queries_per_page:
                break
            k = int(rng.integers(1, min(3, len(vocab)) + 1))
            q = Query(" ".join(str(w) for w in rng.choice(vocab, size=k, replace=False)))
            if q.tokens not in seen:
                seen.add(q.tokens)
                qs.append(q)
        queries[page.url] = qs
    size = 1 << spec.hash_bits
    theta = rng.normal(0.0, spec.oracle_scale, size)
    theta[rng.random(size) >= spec.oracle_sparsity] = 0.0
    return World(pages, catalog, queries, theta, hash_bits=spec.hash_bits, seed=spec.seed,
                 win_scale=spec.win_scale, win_bias=spec.win_bias, click_bias=spec.click_bias,
                 revenue_per_click=spec.revenue_per_click, quick_back_base=spec.quick_back_base,
                 quick_back_bias=spec.quick_back_bias, flagged=flagged,
                 hidden_scale=spec.hidden_scale, win_weight=spec.win_weight)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class Policy(Protocol):
    def serve(self, entry: CatalogEntry, query: Query,
              rng: np.random.Generator | None) -> StitchedAd | None: ...


class OnlinePolicy:
    """Real-time stitching with the per-position models (trainable)."""

    def __init__(self, models: Models, mode: Mode = Mode.EXPLORE,
                 trial_scale: float = DEFAULT_TRIAL_SCALE, joint: bool = False):
        self.models = dict(models)
        self.mode = Mode(mode)
        self.joint = joint
        self.stitcher = Stitcher(self.models, trial_scale=trial_scale)
        self._pools: dict[int, PreparedPools] = {}

    def serve(self, entry, query, rng=None):
        if not entry.titles or not entry.descriptions:
            return None
        pools = self._pools.get(id(entry))
        if pools is None:
            pools = self._pools[id(entry)] = PreparedPools(entry.titles, entry.descriptions)
            self._entries = getattr(self, "_entries", []) + [entry]  # keep ids alive
        if self.mode is Mode.EXPLORE and rng is None:
            rng = np.random.default_rng(0)
        return self.stitcher.stitch_pools(query, pools, self.mode, rng)

    def learn(self, events: Sequence[JointExample], learning_rate: float) -> None:
        """Train on served ads; per position by default, or as one joint model."""
        if self.joint:
            train_joint(self.models, events, learning_rate)
        else:
            batches: dict[Position, list[TrainExample]] = {p: [] for p in POSITIONS}
            for ev in events:
                for pos, x in ev.features.items():
                    batches[pos].append(TrainExample(x, ev.label))
            for pos, batch in batches.items():
                if batch:
                    train_online(self.models[pos], batch, learning_rate)
        self.stitcher.invalidate()

    def with_mode(self, mode: Mode) -> "OnlinePolicy":
        """A view sharing the same models in another mode."""
        other = OnlinePolicy.__new__(OnlinePolicy)
        other.models, other.mode, other.stitcher = self.models, Mode(mode), self.stitcher
        other.joint = self.joint
        other._pools = self._pools
        return other


class PrestitchPolicy:
    """Offline-stitched control: ranks a fixed set of whole ads per page at query time."""

    def __init__(self, ads: Mapping[str, Sequence[StitchedAd]], stitcher: Stitcher):
        self.ads = {url: list(v) for url, v in ads.items()}
        self.stitcher = stitcher

    def serve(self, entry, query, rng=None):
        if not entry.titles or not entry.descriptions:
            return None
        url = entry.titles[0].page_url
        candidates = self.ads.get(url, [])
        if not candidates:
            return None
        scores = [self.stitcher.ad_score(ad, query) for ad in candidates]
        return candidates[int(np.argmax(scores))]


def prestitch_policy(models: Models, catalog: AssetCatalog, m: int, seed: int = 0,
                     perturbation: float = 0.5,
                     trial_scale: float = DEFAULT_TRIAL_SCALE) -> PrestitchPolicy:
    """Pre-compute up to ``m`` distinct ads per page, each a greedy exploit stitch
    without a query under a noise-perturbed copy of the models (the first copy is
    unperturbed)."""
    if m < 1:
        raise ValidationError("m must be >= 1")
    rng = np.random.default_rng(seed)
    blank = Query("")
    ads: dict[str, list[StitchedAd]] = {url: [] for url in catalog}
    seen: dict[str, set] = {url: set() for url in catalog}
    for s in range(m):
        snap = dict(models)
        if s > 0:
            snap = copy_models(models)
            for model in snap.values():
                model.weights += rng.normal(0.0, perturbation, model.weights.shape).astype(np.float32)
        engine = Stitcher(snap, trial_scale=trial_scale)
        for url in catalog:
            entry = catalog[url]
            if not entry.titles or not entry.descriptions:
                continue
            ad = engine.stitch(StitchRequest(blank, entry.titles, entry.descriptions, Mode.EXPLOIT))
            if ad.key() not in seen[url]:
                seen[url].add(ad.key())
                ads[url].append(ad)
    return PrestitchPolicy(ads, Stitcher(models, trial_scale=trial_scale))


# --------------------------------------------------------------------------
# episodes and metrics
# --------------------------------------------------------------------------

_TALLIES = ("srpv", "impressions", "clicks", "quick_backs", "revenue")


@dataclass(frozen=True)
class EpisodeLog:
    srpv: int
    impressions: int
    clicks: int
    quick_backs: int
    revenue: float
    shards: dict | None = field(default=None, compare=False)  # tally name -> per-shard list

    def __post_init__(self):
        if not (0 <= self.quick_backs <= self.clicks <= self.impressions <= self.srpv):
            raise ValidationError("episode tallies violate quick_backs <= clicks <= impressions <= srpv")
        if self.revenue < 0:
            raise ValidationError("negative revenue")

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in _TALLIES}
        if self.shards is not None:
            rec["shards"] = {k: list(v) for k, v in self.shards.items()}
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "EpisodeLog":
        try:
            return cls(int(rec["srpv"]), int(rec["impressions"]), int(rec["clicks"]),
                       int(rec["quick_backs"]), float(rec["revenue"]), rec.get("shards"))
        except KeyError as exc:
            raise ValidationError(f"episode log missing field {exc.args[0]}") from None


@dataclass(frozen=True)
class BusinessMetrics:
    rpm: float
    iy: float
    ctr: float
    qbr: float


def business_metrics(log: EpisodeLog) -> BusinessMetrics:
    if log.srpv <= 0:
        raise ValidationError("srpv must be positive")
    return BusinessMetrics(
        rpm=1000.0 * log.revenue / log.srpv,
        iy=log.impressions / log.srpv,
        ctr=log.clicks / log.impressions if log.impressions else 0.0,
        qbr=log.quick_backs / log.clicks if log.clicks else 0.0,
    )


class Event(NamedTuple):
    step: int
    page_index: int
    query_index: int
    ad: StitchedAd | None
    win_prob: float
    click_prob: float
    shown: bool
    clicked: bool


def simulate(world: World, policy: Policy, n_srpv: int, train: bool = False, *,
             seed: int = 0, batch_size: int = 1000, learning_rate: float = 0.02,
             objective: str = "click", n_shards: int = 100,
             on_event: Callable[[Event], None] | None = None,
             checkpoint_every: int | None = None,
             on_checkpoint: Callable[[int, Policy], None] | None = None) -> EpisodeLog:
    """Run ``n_srpv`` search page views of ``policy`` against ``world``.

    With ``train=True`` the policy learns online: every ``batch_size`` events
    each position model is updated with its slot's examples. The ``click``
    objective uses shown ads labelled by click; ``win`` uses every served ad
    labelled by auction win. All randomness derives from ``(world.seed, seed)``.
    """
    if n_srpv < 1:
        raise ValidationError("n_srpv must be >= 1")
    if objective not in ("click", "win"):
        raise ValidationError("objective must be 'click' or 'win'")
    if train and not hasattr(policy, "learn"):
        raise ValidationError("policy cannot be trained")
    if world.catalog.n_assets() == 0:
        raise ValidationError("world catalog is empty")
    traffic_ss, outcome_ss, policy_ss = np.random.SeedSequence([world.seed, seed]).spawn(3)
    traffic = np.random.default_rng(traffic_ss)
    outcome = np.random.default_rng(outcome_ss)
    policy_rng = np.random.default_rng(policy_ss)

    n_shards = max(1, min(n_shards, n_srpv))
    tallies = {k: np.zeros(n_shards, dtype=float if k == "revenue" else np.int64) for k in _TALLIES}
    page_counts = [len(world.queries[u]) for u in world.urls]
    pending: list[JointExample] = []
    block = 8192
    for start in range(0, n_srpv, block):
        size = min(block, n_srpv - start)
        page_idx = traffic.choice(len(world.urls), size=size, p=world.page_weights)
        q_u = traffic.random(size)
        u = outcome.random((size, 3))
        for b in range(size):
            step = start + b
            shard = step * n_shards // n_srpv
            pi = int(page_idx[b])
            qi = min(int(q_u[b] * page_counts[pi]), page_counts[pi] - 1)
            query = world.query(pi, qi)
            entry = world.entry(pi)
            tallies["srpv"][shard] += 1
            ad = policy.serve(entry, query, policy_rng)
            if ad is None:
                if on_event:
                    on_event(Event(step, pi, qi, None, 0.0, 0.0, False, False))
                continue
            pw, pc, pq = world.ad_probabilities(ad, query)
            shown = u[b, 0] < pw
            clicked = bool(shown and u[b, 1] < pc)
            if shown:
                tallies["impressions"][shard] += 1
            if clicked:
                tallies["clicks"][shard] += 1
                tallies["revenue"][shard] += world.revenue_per_click
                if u[b, 2] < pq:
                    tallies["quick_backs"][shard] += 1
            if on_event:
                on_event(Event(step, pi, qi, ad, pw, pc, bool(shown), clicked))
            if train and (shown or objective == "win"):
                label = int(clicked) if objective == "click" else int(shown)
                pending.append(JointExample(
                    {pos: world.training_features(asset, query, pos) for pos, asset in ad.items()}, label))
                if len(pending) >= batch_size:
                    policy.learn(pending, learning_rate)
                    pending = []
            if checkpoint_every and on_checkpoint and (step + 1) % checkpoint_every == 0:
                on_checkpoint(step + 1, policy)
    if train and pending:
        policy.learn(pending, learning_rate)
    return EpisodeLog(
        srpv=int(tallies["srpv"].sum()),
        impressions=int(tallies["impressions"].sum()),
        clicks=int(tallies["clicks"].sum()),
        quick_backs=int(tallies["quick_backs"].sum()),
        revenue=float(tallies["revenue"].sum()),
        shards={k: v.tolist() for k, v in tallies.items()},
    )


def expected_metrics(world: World, policy: Policy) -> BusinessMetrics:
    """Exact expected metrics of a deterministic policy over the traffic mix."""
    srpv = imp = clicks = qb = 0.0
    for pi, qi, w in world.contexts():
        ad = policy.serve(world.entry(pi), world.query(pi, qi), None)
        srpv += w
        if ad is None:
            continue
        pw, pc, pq = world.ad_probabilities(ad, world.query(pi, qi))
        imp += w * pw
        clicks += w * pw * pc
        qb += w * pw * pc * pq
    revenue = clicks * world.revenue_per_click
    return BusinessMetrics(rpm=1000 * revenue / srpv, iy=imp / srpv,
                           ctr=clicks / imp if imp else 0.0, qbr=qb / clicks if clicks else 0.0)


class OraclePolicy:
    """Serves the oracle-best stitch for each context."""

    def __init__(self, world: World):
        self.world = world
        self._lookup = {}
        for pi, url in enumerate(world.urls):
            for qi, q in enumerate(world.queries[url]):
                self._lookup[(url, q.tokens)] = world.best_ad(pi, qi)

    def serve(self, entry, query, rng=None):
        if not entry.titles:
            return None
        return self._lookup.get((entry.titles[0].page_url, query.tokens))


# --------------------------------------------------------------------------
# A/B comparison
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricDelta:
    treatment: float
    control: float
    delta_pct: float | None
    p_value: float | None
    significant: bool


@dataclass(frozen=True)
class ABReport:
    rpm: MetricDelta
    iy: MetricDelta
    ctr: MetricDelta
    qbr: MetricDelta

    def to_record(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in ("rpm", "iy", "ctr", "qbr")}


def two_proportion_z(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z statistic and two-sided p-value."""
    if n1 == 0 or n2 == 0:
        return 0.0, 1.0
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (x1 / n1 - x2 / n2) / se
    return z, float(2 * norm.sf(abs(z)))


def _delta_pct(t: float, c: float) -> float | None:
    return None if c == 0 else 100.0 * (t - c) / c


def _bootstrap_p(t: EpisodeLog, c: EpisodeLog, num: str, den: str, scale: float,
                 rng: np.random.Generator, n_boot: int) -> float | None:
    if not t.shards or not c.shards:
        return None

    def draws(log):
        s_num = np.asarray(log.shards[num], float)
        s_den = np.asarray(log.shards[den], float)
        pick = rng.integers(0, len(s_num), size=(n_boot, len(s_num)))
        return scale * s_num[pick].sum(1) / np.maximum(s_den[pick].sum(1), 1)

    diff = draws(t) - draws(c)
    lo, hi = np.mean(diff <= 0), np.mean(diff >= 0)
    return float(min(1.0, 2 * min(lo, hi)))


def ab_compare(treatment: EpisodeLog, control: EpisodeLog, *, alpha: float = 0.05,
               n_boot: int = 1000, seed: int = 0) -> ABReport:
    """Relative deltas of RPM, IY, CTR and QBR with significance flags.

    CTR and QBR use a two-proportion z-test; RPM and IY a seeded bootstrap over
    the per-SRPV shards of each log.
    """
    mt, mc = business_metrics(treatment), business_metrics(control)
    rng = np.random.default_rng(seed)
    out = {}
    for name, num, den, scale in (("rpm", "revenue", "srpv", 1000.0), ("iy", "impressions", "srpv", 1.0)):
        t, c = getattr(mt, name), getattr(mc, name)
        p = _bootstrap_p(treatment, control, num, den, scale, rng, n_boot)
        out[name] = MetricDelta(t, c, _delta_pct(t, c), p, p is not None and p < alpha and t != c)
    for name, (x1, n1, x2, n2) in (("ctr", (treatment.clicks, treatment.impressions, control.clicks, control.impressions)),
                                   ("qbr", (treatment.quick_backs, treatment.clicks, control.quick_backs, control.clicks))):
        t, c = getattr(mt, name), getattr(mc, name)
        _, p = two_proportion_z(x1, n1, x2, n2)
        out[name] = MetricDelta(t, c, _delta_pct(t, c), p, p < alpha)
    return ABReport(**out)
