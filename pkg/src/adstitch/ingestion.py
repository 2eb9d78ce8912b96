"""Loading pages and asset candidates, extraction candidates and ad-copy splitting."""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .core import (
    AdAsset,
    AssetCatalog,
    AssetKind,
    AssetSource,
    LandingPage,
    SystemConfig,
    ValidationError,
    fold,
    normalize,
)


class CatalogWarning(UserWarning):
    """Emitted for records that are skipped while loading a catalog."""


@dataclass(frozen=True)
class AdCopyRecord:
    page_url: str
    titles: tuple[str, ...]
    descriptions: tuple[str, ...]
    source: AssetSource = AssetSource.GENERATED

    def __post_init__(self):
        object.__setattr__(self, "titles", tuple(self.titles))
        object.__setattr__(self, "descriptions", tuple(self.descriptions))
        object.__setattr__(self, "source", AssetSource(self.source))

    @classmethod
    def from_record(cls, rec: Mapping) -> "AdCopyRecord":
        return cls(page_url=rec["page_url"], titles=tuple(rec.get("titles", ())),
                   descriptions=tuple(rec.get("descriptions", ())),
                   source=AssetSource(rec.get("source", "Generated")))


def asset_id(page_url: str, kind: AssetKind, index: int, text: str, tag: str = "") -> str:
    text_hash = hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()
    key = f"{tag}|{page_url}|{AssetKind(kind).value}|{index}|{text_hash}"
    return hashlib.blake2b(key.encode("utf-8"), digest_size=10).hexdigest()


# --------------------------------------------------------------------------
# truncation helpers
# --------------------------------------------------------------------------

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


def truncate_words(text: str, limit: int) -> str:
    """Longest prefix of whole words fitting in ``limit`` characters."""
    text = normalize(text)
    if len(text) <= limit:
        return text
    cut = text[:limit + 1]
    space = cut.rfind(" ")
    if space <= 0:
        return ""
    return text[:space].rstrip(" ,;:-")


def truncate_sentences(text: str, limit: int) -> str:
    """Cut at the last sentence end within ``limit``; fall back to a word boundary."""
    text = normalize(text)
    if len(text) <= limit:
        return text
    ends = [m.end() for m in _SENTENCE_END.finditer(text) if m.end() <= limit]
    if ends:
        return text[:ends[-1]]
    return truncate_words(text, limit)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def extract_assets(page: LandingPage, config: SystemConfig | None = None) -> list[AdAsset]:
    """Extraction candidates: titles from the page title and headings, descriptions
    from body snippets. Over-long text is cut at a word (or sentence) boundary."""
    config = config or SystemConfig()
    out: list[AdAsset] = []
    seen: set[tuple[AssetKind, str]] = set()

    def emit(kind: AssetKind, raw: str, text: str) -> None:
        if not text:
            return
        key = (kind, fold(text))
        if key in seen:
            return
        seen.add(key)
        idx = sum(1 for a in out if a.kind is kind)
        out.append(AdAsset(id=asset_id(page.url, kind, idx, text, "x"), page_url=page.url,
                           kind=kind, text=text, source=AssetSource.EXTRACTION))

    for raw in (page.page_title, *page.visual_headings):
        emit(AssetKind.TITLE, raw, truncate_words(raw, config.max_title_chars))
    for raw in page.body_snippets:
        emit(AssetKind.DESCRIPTION, raw, truncate_sentences(raw, config.max_desc_chars))
    return out


def split_adcopy(record: AdCopyRecord) -> list[AdAsset]:
    """Split a full ad copy into one asset per title and per description."""
    if not record.titles:
        raise ValidationError(f"missing title in ad copy for {record.page_url}")
    if not record.descriptions:
        raise ValidationError(f"missing description in ad copy for {record.page_url}")
    if len(record.titles) > 3 or len(record.descriptions) > 2:
        raise ValidationError(f"ad copy for {record.page_url} has more than 3 titles or 2 descriptions")
    assets = []
    for kind, texts in ((AssetKind.TITLE, record.titles), (AssetKind.DESCRIPTION, record.descriptions)):
        for i, text in enumerate(texts):
            assets.append(AdAsset(id=asset_id(record.page_url, kind, i, text, "c"),
                                  page_url=record.page_url, kind=kind, text=text,
                                  source=record.source))
    return assets


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: record is not an object")
            yield lineno, rec


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def load_pages(path: str | Path) -> list[LandingPage]:
    pages = []
    for lineno, rec in read_jsonl(path):
        try:
            pages.append(LandingPage.from_record(rec))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad page record ({exc})") from None
    return pages


def parse_asset_records(path: str | Path) -> Iterator[tuple[int, AdAsset]]:
    for lineno, rec in read_jsonl(path):
        fmt = rec.get("format", "asset")
        try:
            if fmt == "asset":
                yield lineno, AdAsset.from_record(rec)
            elif fmt == "adcopy":
                for a in split_adcopy(AdCopyRecord.from_record(rec)):
                    yield lineno, a
            else:
                raise ValidationError(f"unknown format {fmt!r}")
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad asset record ({exc})") from None


def load_catalog(pages_path: str | Path, assets_path: str | Path) -> tuple[list[LandingPage], AssetCatalog]:
    """Load pages and assets. Assets for unknown pages are dropped with a
    :class:`CatalogWarning`. Catalog keys follow page-file order; assets
    within a page follow asset-file order."""
    pages = load_pages(pages_path)
    urls = [p.url for p in pages]
    known = set(urls)
    kept = []
    for lineno, asset in parse_asset_records(assets_path):
        if asset.page_url not in known:
            warnings.warn(f"{assets_path}:{lineno}: asset {asset.id} references unknown page "
                          f"{asset.page_url}; dropped", CatalogWarning, stacklevel=2)
            continue
        kept.append(asset)
    return pages, AssetCatalog.from_assets(kept, urls)


def catalog_records(catalog: AssetCatalog) -> Iterator[dict]:
    for asset in catalog.assets():
        yield asset.to_record()
