"""Human-judgment aggregation and the Overall Good ship gate."""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .core import AdAsset, AssetCatalog, ValidationError, host_of, registrable_domain


class TextQuality(str, enum.Enum):
    GOOD = "Good"
    FAIR = "Fair"
    BAD = "Bad"
    EMBARRASSING = "Embarrassing"
    NOT_SCORABLE = "NotScorable"


class YesNo(str, enum.Enum):
    YES = "Yes"
    NO = "No"


@dataclass(frozen=True)
class Judgment:
    asset_id: str
    text_quality: TextQuality
    human_like: YesNo
    factual: YesNo
    relevant: YesNo

    def __post_init__(self):
        object.__setattr__(self, "text_quality", TextQuality(self.text_quality))
        for name in ("human_like", "factual", "relevant"):
            object.__setattr__(self, name, YesNo(getattr(self, name)))

    @classmethod
    def from_record(cls, rec: Mapping) -> "Judgment":
        missing = [k for k in ("asset_id", "text_quality", "human_like", "factual", "relevant") if k not in rec]
        if missing:
            raise ValidationError(f"judgment missing fields: {', '.join(missing)}")
        return cls(str(rec["asset_id"]), rec["text_quality"], rec["human_like"], rec["factual"], rec["relevant"])


def overall_good(j: Judgment) -> bool:
    return (j.text_quality in (TextQuality.GOOD, TextQuality.FAIR)
            and j.human_like is YesNo.YES
            and j.factual is YesNo.YES
            and j.relevant is YesNo.YES)


def z_for(confidence: float) -> float:
    """Upper ``confidence`` quantile of the standard normal."""
    if not 0.5 < confidence < 1.0:
        raise ValidationError("confidence must lie in (0.5, 1)")
    return NormalDist().inv_cdf(confidence)


def wilson_interval(successes: int, n: int, z: float) -> tuple[float, float]:
    """Wilson score interval for ``successes`` out of ``n`` at normal quantile ``z``."""
    if n <= 0:
        raise ValidationError("n must be positive")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    return max(0.0, centre - half), min(1.0, centre + half)


def wilson_lower(successes: int, n: int, confidence: float = 0.975) -> float:
    """One-sided Wilson lower bound at the given confidence."""
    return wilson_interval(successes, n, z_for(confidence))[0]


@dataclass(frozen=True)
class GateReport:
    n: int
    overall_good: int
    rate: float
    lower_bound: float
    threshold: float
    confidence: float
    text_quality_rate: float
    human_like_rate: float
    factual_rate: float
    relevant_rate: float
    ci_low: float
    ci_high: float

    @property
    def passed(self) -> bool:
        return self.lower_bound >= self.threshold

    def to_record(self) -> dict:
        rec = dict(self.__dict__)
        rec["passed"] = self.passed
        return rec


def gate(judgments: Sequence[Judgment], threshold: float = 0.9, confidence: float = 0.975) -> GateReport:
    """Overall Good rate with its one-sided Wilson lower bound against ``threshold``.

    The report also carries a two-sided 95% Wilson interval for tables.
    """
    n = len(judgments)
    if n == 0:
        raise ValidationError("cannot gate an empty judgment set")
    good = sum(overall_good(j) for j in judgments)
    scorable = [j for j in judgments if j.text_quality is not TextQuality.NOT_SCORABLE]
    tq = (sum(j.text_quality in (TextQuality.GOOD, TextQuality.FAIR) for j in scorable) / len(scorable)
          if scorable else 0.0)
    lo, hi = wilson_interval(good, n, z_for(0.975))
    return GateReport(
        n=n,
        overall_good=good,
        rate=good / n,
        lower_bound=wilson_lower(good, n, confidence),
        threshold=threshold,
        confidence=confidence,
        text_quality_rate=tq,
        human_like_rate=sum(j.human_like is YesNo.YES for j in judgments) / n,
        factual_rate=sum(j.factual is YesNo.YES for j in judgments) / n,
        relevant_rate=sum(j.relevant is YesNo.YES for j in judgments) / n,
        ci_low=lo,
        ci_high=hi,
    )


@dataclass(frozen=True)
class EvalSample:
    assets: list[AdAsset]
    shortfall: bool


def sample_for_eval(catalog: AssetCatalog, per_domain_cap: int = 50, total: int = 500,
                    seed: int = 0) -> EvalSample:
    """Stratified sample: at most ``per_domain_cap`` assets per domain, then a
    uniform subsample of ``total``. Returns everything available, flagged, when
    the capped pool is smaller than ``total``."""
    rng = np.random.default_rng(seed)
    by_domain: dict[str, list[AdAsset]] = defaultdict(list)
    for asset in catalog.assets():
        by_domain[registrable_domain(host_of(asset.page_url))].append(asset)
    pool: list[AdAsset] = []
    for domain in sorted(by_domain):
        items = by_domain[domain]
        if len(items) > per_domain_cap:
            pick = np.sort(rng.choice(len(items), size=per_domain_cap, replace=False))
            items = [items[i] for i in pick]
        pool.extend(items)
    if len(pool) <= total:
        return EvalSample(pool, shortfall=len(pool) < total)
    pick = np.sort(rng.choice(len(pool), size=total, replace=False))
    return EvalSample([pool[i] for i in pick], shortfall=False)
