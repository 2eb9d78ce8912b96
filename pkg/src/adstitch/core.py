"""Domain types, text normalization and validation shared across the package."""

from __future__ import annotations

import enum
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping
from urllib.parse import urlsplit


class AdStitchError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(AdStitchError, ValueError):
    pass


class NotFoundError(AdStitchError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class AssetKind(str, enum.Enum):
    TITLE = "Title"
    DESCRIPTION = "Description"


class AssetSource(str, enum.Enum):
    ADVERTISER = "Advertiser"
    EXTRACTION = "Extraction"
    GENERATED = "Generated"
    GUIDED = "Guided"


# The remaining selling-point categories are declared through SystemConfig.
NAMED_CATEGORIES = ("ProductOrService", "AdvertiserNameOrBrand", "Location")
MAX_CATEGORIES = 12

# Suffixes recognised when deciding whether a token looks like a domain name.
KNOWN_SUFFIXES = frozenset(
    """
    com net org edu gov mil int info biz io co ai app dev shop store online site
    tech xyz me tv us uk de fr es it nl se no dk fi pl ru cn jp kr in au ca br mx
    ch at be ie nz za eu asia mobi pro name travel jobs museum club top
    """.split()
)
# Second-level labels under which registrations happen one level deeper.
_SECOND_LEVEL = frozenset({"co", "com", "org", "net", "ac", "gov", "edu"})


# --------------------------------------------------------------------------
# text handling
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def normalize(text: str) -> str:
    """NFC-compose, collapse whitespace runs to one space and strip.

    Casing is preserved; use :func:`fold` for case-insensitive matching.
    """
    if not text:
        return ""
    text = unicodedata.normalize("NFC", text)
    return " ".join(text.split())


def fold(text: str) -> str:
    """Case-folded copy of ``normalize(text)`` used for all matching."""
    return normalize(text).casefold()


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation is dropped.

    >>> tokenize("Buy Now!")
    ['buy', 'now']
    """
    return _TOKEN_RE.findall(normalize(text).lower())


def registrable_domain(host: str) -> str:
    """Best-effort registrable domain for a host name (``shop.abc.co.uk`` -> ``abc.co.uk``)."""
    host = host.lower().strip(".")
    labels = [lab for lab in host.split(".") if lab]
    if len(labels) <= 2:
        return ".".join(labels)
    if labels[-2] in _SECOND_LEVEL and len(labels[-1]) == 2:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def host_of(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemConfig:
    T: int = 10
    D: int = 10
    max_title_chars: int = 30
    max_desc_chars: int = 90
    hash_bits: int = 22
    learning_rate: float = 0.02
    batch_size: int = 1000
    dpp_epsilon: float = 1e-9
    rng_seed: int = 0
    trial_scale: float = 4.0
    embed_dim: int = 256
    kernel_jitter: float = 1e-6
    objective: str = "click"
    extra_categories: tuple[str, ...] = ()
    require_full_ad: bool = False

    def __post_init__(self):
        problems = []
        for name in ("T", "D", "max_title_chars", "max_desc_chars", "batch_size", "embed_dim"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if not 16 <= self.hash_bits <= 32:
            problems.append("hash_bits must be in [16, 32]")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if self.dpp_epsilon <= 0:
            problems.append("dpp_epsilon must be positive")
        if self.rng_seed < 0:
            problems.append("rng_seed must be unsigned")
        if self.objective not in ("click", "win"):
            problems.append("objective must be 'click' or 'win'")
        if len(NAMED_CATEGORIES) + len(self.extra_categories) > MAX_CATEGORIES:
            problems.append(f"at most {MAX_CATEGORIES} categories")
        if self.require_full_ad and (self.T < 3 or self.D < 2):
            problems.append("full five-slot ads need T >= 3 and D >= 2")
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def categories(self) -> tuple[str, ...]:
        return NAMED_CATEGORIES + tuple(self.extra_categories)


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LandingPage:
    url: str
    domain: str
    page_title: str = ""
    visual_headings: tuple[str, ...] = ()
    body_snippets: tuple[str, ...] = ()
    full_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "visual_headings", tuple(self.visual_headings))
        object.__setattr__(self, "body_snippets", tuple(self.body_snippets))
        object.__setattr__(self, "domain", self.domain.lower())
        host = host_of(self.url)
        if not self.url or not host:
            raise ValidationError(f"page url is not an absolute URL: {self.url!r}")
        if not (host == self.domain or host.endswith("." + self.domain)):
            raise ValidationError(f"domain {self.domain!r} does not match host {host!r}")

    @classmethod
    def build(cls, url: str, page_title: str = "", visual_headings: Iterable[str] = (),
              body_snippets: Iterable[str] = (), extra_text: str = "",
              domain: str | None = None) -> "LandingPage":
        """Assemble a page whose full text contains every structured field."""
        headings = tuple(visual_headings)
        snippets = tuple(body_snippets)
        parts = [page_title, *headings, *snippets, extra_text]
        full = normalize(" ".join(p for p in parts if p))
        return cls(url=url, domain=domain or registrable_domain(host_of(url)),
                   page_title=page_title, visual_headings=headings,
                   body_snippets=snippets, full_text=full)

    def missing_fields(self) -> list[str]:
        """Structured fields whose text does not occur in ``full_text``."""
        body = fold(self.full_text)
        fields = [self.page_title, *self.visual_headings, *self.body_snippets]
        return [f for f in fields if f and fold(f) not in body]

    def to_record(self) -> dict:
        return {
            "url": self.url,
            "domain": self.domain,
            "page_title": self.page_title,
            "visual_headings": list(self.visual_headings),
            "body_snippets": list(self.body_snippets),
            "full_text": self.full_text,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "LandingPage":
        url = rec["url"]
        return cls(
            url=url,
            domain=rec.get("domain") or registrable_domain(host_of(url)),
            page_title=rec.get("page_title", ""),
            visual_headings=tuple(rec.get("visual_headings", ())),
            body_snippets=tuple(rec.get("body_snippets", ())),
            full_text=rec.get("full_text", ""),
        )


@dataclass(frozen=True)
class AdAsset:
    id: str
    page_url: str
    kind: AssetKind
    text: str
    source: AssetSource = AssetSource.GENERATED
    category: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AssetKind(self.kind))
        object.__setattr__(self, "source", AssetSource(self.source))

    def to_record(self) -> dict:
        rec = {
            "format": "asset",
            "id": self.id,
            "page_url": self.page_url,
            "kind": self.kind.value,
            "text": self.text,
            "source": self.source.value,
        }
        if self.category is not None:
            rec["category"] = self.category
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "AdAsset":
        return cls(id=str(rec["id"]), page_url=rec["page_url"], kind=AssetKind(rec["kind"]),
                   text=rec["text"], source=AssetSource(rec.get("source", "Generated")),
                   category=rec.get("category"))


@dataclass(frozen=True)
class CatalogEntry:
    titles: tuple[AdAsset, ...] = ()
    descriptions: tuple[AdAsset, ...] = ()

    def __len__(self) -> int:
        return len(self.titles) + len(self.descriptions)

    def __iter__(self) -> Iterator[AdAsset]:
        yield from self.titles
        yield from self.descriptions


class AssetCatalog(Mapping[str, CatalogEntry]):
    """Read-only mapping ``page_url -> CatalogEntry``."""

    def __init__(self, entries: Mapping[str, CatalogEntry] | None = None):
        self._entries: dict[str, CatalogEntry] = {}
        seen: set[str] = set()
        for url, entry in (entries or {}).items():
            for kind, pool in ((AssetKind.TITLE, entry.titles),
                               (AssetKind.DESCRIPTION, entry.descriptions)):
                for a in pool:
                    if a.page_url != url:
                        raise ValidationError(f"asset {a.id} filed under {url} but points to {a.page_url}")
                    if a.kind is not kind:
                        raise ValidationError(f"asset {a.id} of kind {a.kind.value} in {kind.value} list")
                    if a.id in seen:
                        raise ValidationError(f"duplicate asset id {a.id}")
                    seen.add(a.id)
            self._entries[url] = CatalogEntry(tuple(entry.titles), tuple(entry.descriptions))

    @classmethod
    def from_assets(cls, assets: Iterable[AdAsset], urls: Iterable[str] = ()) -> "AssetCatalog":
        """Group assets by page; ``urls`` adds (possibly empty) entries in that order."""
        titles: dict[str, list[AdAsset]] = {u: [] for u in urls}
        descs: dict[str, list[AdAsset]] = {u: [] for u in titles}
        for a in assets:
            titles.setdefault(a.page_url, [])
            descs.setdefault(a.page_url, [])
            (titles if a.kind is AssetKind.TITLE else descs)[a.page_url].append(a)
        return cls({u: CatalogEntry(tuple(titles[u]), tuple(descs[u])) for u in titles})

    def __getitem__(self, url: str) -> CatalogEntry:
        return self._entries[url]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def assets(self) -> Iterator[AdAsset]:
        for entry in self._entries.values():
            yield from entry

    def n_assets(self) -> int:
        return sum(len(e) for e in self._entries.values())

    def asset_index(self) -> dict[str, AdAsset]:
        return {a.id: a for a in self.assets()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, AssetCatalog):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"AssetCatalog({len(self)} urls, {self.n_assets()} assets)"


class Position(str, enum.Enum):
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    D1 = "D1"
    D2 = "D2"

    @property
    def kind(self) -> AssetKind:
        return _POSITION_KIND[self]


POSITIONS = tuple(Position)
_POSITION_KIND = {p: AssetKind.TITLE if p.value[0] == "T" else AssetKind.DESCRIPTION for p in POSITIONS}
_SLOT_NAMES = {Position.T1: "title1", Position.T2: "title2", Position.T3: "title3",
               Position.D1: "desc1", Position.D2: "desc2"}


@dataclass(frozen=True)
class StitchedAd:
    """A composed ad copy. ``scores`` and ``evaluations`` are serving diagnostics."""

    title1: AdAsset
    desc1: AdAsset
    title2: AdAsset | None = None
    title3: AdAsset | None = None
    desc2: AdAsset | None = None
    scores: tuple[float, ...] = field(default=(), compare=False)
    evaluations: int = field(default=0, compare=False)

    def __post_init__(self):
        ids = [a.id for a in self.assets()]
        if len(ids) != len(set(ids)):
            raise ValidationError("stitched ad repeats an asset")
        for pos, asset in self.items():
            if asset.kind is not pos.kind:
                raise ValidationError(f"{asset.kind.value} asset in slot {pos.value}")

    def slot(self, pos: Position) -> AdAsset | None:
        return getattr(self, _SLOT_NAMES[pos])

    def items(self) -> list[tuple[Position, AdAsset]]:
        return [(p, a) for p in POSITIONS if (a := self.slot(p)) is not None]

    def assets(self) -> list[AdAsset]:
        return [a for _, a in self.items()]

    def key(self) -> tuple[str | None, ...]:
        return tuple(a.id if (a := self.slot(p)) is not None else None for p in POSITIONS)

    def to_record(self) -> dict:
        rec = {}
        for pos in POSITIONS:
            a = self.slot(pos)
            rec[_SLOT_NAMES[pos]] = None if a is None else {"id": a.id, "text": a.text}
        return rec


@dataclass(frozen=True)
class Query:
    raw: str
    tokens: tuple[str, ...] = field(default=None)  # derived when omitted

    def __post_init__(self):
        derived = tuple(tokenize(self.raw))
        if self.tokens is None:
            object.__setattr__(self, "tokens", derived)
        elif tuple(self.tokens) != derived:
            raise ValidationError("query tokens do not match tokenize(raw)")


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def validate_asset(asset: AdAsset, config: SystemConfig | None = None) -> list[str]:
    """Return the list of invariant violations for ``asset``; empty means ok."""
    config = config or SystemConfig()
    text = normalize(asset.text)
    problems = []
    if not text:
        problems.append("empty text")
    if not asset.id:
        problems.append("empty id")
    if asset.kind is AssetKind.TITLE and len(text) > config.max_title_chars:
        problems.append("title too long")
    if asset.kind is AssetKind.DESCRIPTION and len(text) > config.max_desc_chars:
        problems.append("description too long")
    if asset.category is not None and asset.category not in config.categories:
        problems.append(f"unknown category {asset.category!r}")
    return problems
