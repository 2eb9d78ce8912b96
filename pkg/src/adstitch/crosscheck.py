"""Factuality cross-checks of assets against their landing page.

Every check follows the same rule: a claim found in the asset (a sensitive
phrase, a brand name, a domain) must also be supported by the page.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    KNOWN_SUFFIXES,
    AdAsset,
    AssetCatalog,
    LandingPage,
    NotFoundError,
    ValidationError,
    fold,
    tokenize,
)

NUM_WILDCARD = "<NUM>"
_NUM_RE = r"\d+(?:[.,]\d+)*"


class Rule(str, enum.Enum):
    PHRASE = "Phrase"
    BRAND = "Brand"
    DOMAIN = "Domain"


@dataclass(frozen=True)
class Violation:
    rule: Rule
    matched_span: str


@dataclass(frozen=True)
class CheckVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.passed

    def to_record(self) -> dict:
        return {"passed": self.passed,
                "violations": [{"rule": v.rule.value, "matched_span": v.matched_span}
                               for v in self.violations]}


PASS = CheckVerdict()


def _phrase_regex(pattern: str) -> re.Pattern:
    parts = [re.escape(" ".join(p.split())).replace(r"\ ", r"\s+") for p in pattern.split(NUM_WILDCARD)]
    body = _NUM_RE.join(parts)
    # token boundaries only where the pattern edge is a word character or a number
    probe = pattern.replace(NUM_WILDCARD, "0")
    left = r"(?<!\w)" if probe[0].isalnum() else ""
    right = r"(?!\w)" if probe[-1].isalnum() else ""
    return re.compile(left + body + right, re.IGNORECASE)


@dataclass(frozen=True)
class RuleSet:
    sensitive_phrases: tuple[str, ...] = ()
    brand_lexicon: frozenset[str] = frozenset()
    domain_pattern_enabled: bool = True
    _compiled: tuple = field(default=(), init=False, repr=False, compare=False)
    _brands: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        phrases = tuple(" ".join(p.split()) for p in self.sensitive_phrases)
        if any(not p for p in phrases):
            raise ValidationError("sensitive phrases must be non-empty")
        object.__setattr__(self, "sensitive_phrases", phrases)
        object.__setattr__(self, "brand_lexicon", frozenset(self.brand_lexicon))
        object.__setattr__(self, "_compiled", tuple(_phrase_regex(p) for p in phrases))
        brands = {}
        for b in self.brand_lexicon:
            toks = tuple(tokenize(b))
            if toks:
                brands.setdefault(toks, b)
        # longest first so the scan below prefers the longest match
        object.__setattr__(self, "_brands", tuple(sorted(brands.items(), key=lambda kv: (-len(kv[0]), kv[0]))))

    @classmethod
    def empty(cls) -> "RuleSet":
        return cls((), frozenset(), False)

    def with_phrase(self, phrase: str) -> "RuleSet":
        return RuleSet(self.sensitive_phrases + (phrase,), self.brand_lexicon, self.domain_pattern_enabled)


def load_rules(path: str | Path) -> RuleSet:
    """Parse a rules file with ``[phrases]``, ``[brands]`` and ``[options]`` sections.

    ``[options]`` accepts ``domain_check = on|off``. Lines starting with ``#``
    are comments.
    """
    phrases: list[str] = []
    brands: list[str] = []
    domain = True
    section = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("phrases", "brands", "options"):
                raise ValidationError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if section == "phrases":
            phrases.append(line)
        elif section == "brands":
            brands.append(line)
        elif section == "options":
            key, _, value = line.partition("=")
            if key.strip().lower() != "domain_check":
                raise ValidationError(f"{path}:{lineno}: unknown option {key.strip()!r}")
            value = value.strip().lower()
            if value not in ("on", "off", "true", "false", "1", "0", "yes", "no"):
                raise ValidationError(f"{path}:{lineno}: domain_check must be on or off")
            domain = value in ("on", "true", "1", "yes")
        else:
            raise ValidationError(f"{path}:{lineno}: entry outside of a section")
    return RuleSet(tuple(phrases), frozenset(brands), domain)


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------

def _contains_phrase(haystack: str, needle: str) -> bool:
    """Token-bounded, case-folded containment of ``needle`` in ``haystack``."""
    needle = fold(needle)
    if not needle:
        return True
    left = r"(?<!\w)" if needle[0].isalnum() else ""
    right = r"(?!\w)" if needle[-1].isalnum() else ""
    pattern = left + re.escape(needle).replace(r"\ ", r"\s+") + right
    return re.search(pattern, fold(haystack)) is not None


def phrase_check(asset: AdAsset, page: LandingPage, rules: RuleSet) -> CheckVerdict:
    """Every sensitive phrase in the asset must appear verbatim (case-folded) in the page.

    Numbers bound by a ``<NUM>`` wildcard must match exactly, so "15% Discount"
    is not supported by a page offering "10% discount".
    """
    text = " ".join(asset.text.split())
    violations = []
    for rx in rules._compiled:
        for m in rx.finditer(text):
            span = m.group(0)
            if not _contains_phrase(page.full_text, span):
                violations.append(Violation(Rule.PHRASE, span))
    return CheckVerdict(tuple(violations))


def find_brands(text: str, rules: RuleSet) -> list[str]:
    """Lexicon brands in ``text``, longest match first at each token position."""
    toks = tokenize(text)
    found = []
    i = 0
    while i < len(toks):
        for btoks, brand in rules._brands:
            if tuple(toks[i:i + len(btoks)]) == btoks:
                found.append(brand)
                i += len(btoks)
                break
        else:
            i += 1
    return found


def brand_check(asset: AdAsset, page: LandingPage, rules: RuleSet) -> CheckVerdict:
    url = page.url.lower()
    violations = []
    for brand in find_brands(asset.text, rules):
        squashed = "".join(tokenize(brand))
        if _contains_phrase(page.full_text, " ".join(tokenize(brand))) or squashed in url:
            continue
        violations.append(Violation(Rule.BRAND, brand))
    return CheckVerdict(tuple(violations))


_DOMAIN_RE = re.compile(r"(?<![\w@.-])((?:[a-z0-9](?:[a-z0-9-]*[a-z0-9])?\.)+([a-z]{2,}))(?![\w-])",
                        re.IGNORECASE)


def find_domains(text: str) -> list[str]:
    return [m.group(1) for m in _DOMAIN_RE.finditer(text) if m.group(2).lower() in KNOWN_SUFFIXES]


def domain_check(asset: AdAsset, page: LandingPage) -> CheckVerdict:
    """Domain-looking tokens must be the page's domain or one of its subdomains."""
    own = page.domain.lower()
    violations = []
    for dom in find_domains(asset.text):
        d = dom.lower()
        if d != own and not d.endswith("." + own):
            violations.append(Violation(Rule.DOMAIN, dom))
    return CheckVerdict(tuple(violations))


def check_asset(asset: AdAsset, page: LandingPage, rules: RuleSet) -> CheckVerdict:
    """First failing verdict among phrase, brand and domain checks (or a pass)."""
    v = phrase_check(asset, page, rules)
    if not v:
        return v
    v = brand_check(asset, page, rules)
    if not v:
        return v
    if rules.domain_pattern_enabled:
        v = domain_check(asset, page)
        if not v:
            return v
    return PASS


def filter_catalog(catalog: AssetCatalog, pages: Sequence[LandingPage] | dict,
                   rules: RuleSet) -> tuple[AssetCatalog, list[tuple[AdAsset, CheckVerdict]]]:
    """Split the catalog into kept assets and ``(asset, first failing verdict)`` pairs."""
    by_url = pages if isinstance(pages, dict) else {p.url: p for p in pages}
    kept: list[AdAsset] = []
    rejected: list[tuple[AdAsset, CheckVerdict]] = []
    for url in catalog:
        page = by_url.get(url)
        if page is None:
            raise NotFoundError(f"no landing page for {url}")
        for asset in catalog[url]:
            verdict = check_asset(asset, page, rules)
            if verdict:
                kept.append(asset)
            else:
                rejected.append((asset, verdict))
    return AssetCatalog.from_assets(kept, list(catalog)), rejected


def flagged_ids(rejected: Iterable[tuple[AdAsset, CheckVerdict]]) -> frozenset[str]:
    return frozenset(a.id for a, _ in rejected)
