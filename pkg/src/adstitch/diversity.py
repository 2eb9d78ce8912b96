"""N-gram diversity metrics: PairwiseBLEU, SelfBLEU and Distinct-N.

Scores are on a 0-100 scale and reported per n-gram order as well as averaged
over orders 1..4. Sentence BLEU leaves unigram precision unsmoothed and adds
one to numerator and denominator of higher-order precisions.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ValidationError, tokenize

ORDERS = (1, 2, 3, 4)
Tokens = Sequence[str]


def ngram_multiset(tokens: Tokens, n: int) -> Counter:
    if n < 1:
        raise ValidationError("n-gram order must be >= 1")
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, ref_lengths: Sequence[int]) -> int:
    return min(ref_lengths, key=lambda r: (abs(r - c), r))


def _bleu(clipped: Sequence[int], c: int, r: int, max_n: int) -> float:
    """Smoothed BLEU from clipped match counts per order (index 0 is unigrams)."""
    if clipped[0] == 0:
        return 0.0
    log_p = math.log(clipped[0] / c)
    for n in range(2, max_n + 1):
        total = max(0, c - n + 1)
        log_p += math.log((clipped[n - 1] + 1) / (total + 1))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


def _clip(cand: Counter, ref_max: dict) -> int:
    return sum(min(cnt, ref_max.get(g, 0)) for g, cnt in cand.items())


def sentence_bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> float:
    """Sentence BLEU in [0, 1] with clipped precisions and brevity penalty."""
    if not candidate:
        raise ValidationError("empty candidate")
    refs = [r for r in references if r]
    if not refs:
        raise ValidationError("no non-empty references")
    clipped = []
    for n in range(1, max_n + 1):
        ref_max: dict = {}
        for ref in refs:
            for g, cnt in ngram_multiset(ref, n).items():
                if cnt > ref_max.get(g, 0):
                    ref_max[g] = cnt
        clipped.append(_clip(ngram_multiset(candidate, n), ref_max))
    r = _closest_ref_length(len(candidate), [len(x) for x in refs])
    return _bleu(clipped, len(candidate), r, max_n)


def modified_precision(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    """Unsmoothed ``(clipped matches, candidate n-gram count)`` for one order."""
    ref_max: dict = {}
    for ref in references:
        for g, cnt in ngram_multiset(ref, n).items():
            ref_max[g] = max(cnt, ref_max.get(g, 0))
    cand = ngram_multiset(candidate, n)
    return _clip(cand, ref_max), sum(cand.values())


# --------------------------------------------------------------------------
# corpus-level metrics
# --------------------------------------------------------------------------

def _check_texts(texts: Sequence[Tokens]) -> list[list[str]]:
    if len(texts) < 2:
        raise ValidationError("need at least two texts")
    out = [list(t) for t in texts]
    if any(not t for t in out):
        raise ValidationError("empty text after tokenization")
    return out


def _pairwise_orders(texts: Sequence[Tokens], max_n: int = 4) -> np.ndarray:
    """PairwiseBLEU for every cumulative order 1..max_n, shape ``(max_n,)``."""
    texts = _check_texts(texts)
    counts = [[ngram_multiset(t, n) for n in range(1, max_n + 1)] for t in texts]
    sums = np.zeros(max_n)
    for i, ti in enumerate(texts):
        for j, tj in enumerate(texts):
            if i == j:
                continue
            clipped = [_clip(counts[i][k], counts[j][k]) for k in range(max_n)]
            r = len(tj)
            for m in range(1, max_n + 1):
                sums[m - 1] += _bleu(clipped, len(ti), r, m)
    n = len(texts)
    return 100.0 * sums / (n * (n - 1))


def _self_orders(texts: Sequence[Tokens], max_n: int = 4) -> np.ndarray:
    """SelfBLEU for every cumulative order 1..max_n, shape ``(max_n,)``.

    Leave-one-out reference counts come from the top two counts of each
    n-gram across the set, so the cost is linear in the number of n-grams.
    """
    texts = _check_texts(texts)
    n_texts = len(texts)
    counts = [[ngram_multiset(t, n) for n in range(1, max_n + 1)] for t in texts]
    top: list[dict] = []
    for k in range(max_n):
        best: dict = {}
        for i in range(n_texts):
            for g, cnt in counts[i][k].items():
                entry = best.get(g)
                if entry is None:
                    best[g] = [cnt, i, 0]
                elif cnt > entry[0]:
                    entry[2] = entry[0]
                    entry[0], entry[1] = cnt, i
                elif cnt > entry[2]:
                    entry[2] = cnt
        top.append(best)

    lengths = [len(t) for t in texts]
    length_counts = Counter(lengths)
    closest = {}  # candidate length -> closest length among the other texts
    for c, k in length_counts.items():
        others = [r for r in length_counts if r != c or k > 1]
        closest[c] = _closest_ref_length(c, others)
    sums = np.zeros(max_n)
    for i in range(n_texts):
        clipped = []
        for k in range(max_n):
            best = top[k]
            s = 0
            for g, cnt in counts[i][k].items():
                c1, owner, c2 = best[g]
                s += min(cnt, c2 if owner == i else c1)
            clipped.append(s)
        c = lengths[i]
        r = closest[c]
        for m in range(1, max_n + 1):
            sums[m - 1] += _bleu(clipped, c, r, m)
    return 100.0 * sums / n_texts


def pairwise_bleu(texts: Sequence[Tokens], max_n: int = 4) -> float:
    """Mean BLEU over ordered pairs ``(i, j)``, ``i != j``, single reference, 0-100."""
    return float(_pairwise_orders(texts, max_n)[max_n - 1])


def self_bleu(texts: Sequence[Tokens], max_n: int = 4) -> float:
    """Mean BLEU of each text against all the others as references, 0-100."""
    return float(_self_orders(texts, max_n)[max_n - 1])


def distinct_n(texts: Sequence[Tokens], n: int = 1) -> float:
    """100 x distinct / total pooled n-grams of order ``n``."""
    pooled: Counter = Counter()
    for t in texts:
        pooled.update(ngram_multiset(list(t), n))
    total = sum(pooled.values())
    if total == 0:
        raise ValidationError(f"no {n}-grams in any text")
    return 100.0 * len(pooled) / total


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiversityReport:
    pairwise_bleu: float
    self_bleu: float
    distinct_n: float
    per_order: dict  # n -> (pb, sb, dist or None)
    count: int

    def to_record(self) -> dict:
        rec = {"count": self.count, "pairwise_bleu": self.pairwise_bleu,
               "self_bleu": self.self_bleu, "distinct_n": self.distinct_n}
        for n, (pb, sb, dist) in sorted(self.per_order.items()):
            rec[f"pb_{n}"] = pb
            rec[f"sb_{n}"] = sb
            rec[f"dist_{n}"] = dist
        return rec


def diversity_report(texts: Sequence[str], orders: Sequence[int] = ORDERS) -> DiversityReport:
    toks = [tokenize(t) for t in texts]
    _check_texts(toks)
    max_n = max(orders)
    pb = _pairwise_orders(toks, max_n)
    sb = _self_orders(toks, max_n)
    per_order = {}
    dists = []
    for n in orders:
        try:
            d = distinct_n(toks, n)
            dists.append(d)
        except ValidationError:
            d = None
        per_order[n] = (float(pb[n - 1]), float(sb[n - 1]), d)
    if not dists:
        raise ValidationError("texts too short for every n-gram order")
    return DiversityReport(
        pairwise_bleu=float(np.mean([per_order[n][0] for n in orders])),
        self_bleu=float(np.mean([per_order[n][1] for n in orders])),
        distinct_n=float(np.mean(dists)),
        per_order=per_order,
        count=len(texts),
    )


def self_bleu_score(texts: Sequence[Tokens], orders: Sequence[int] = ORDERS) -> float:
    """Order-averaged SelfBLEU, as reported in :class:`DiversityReport`."""
    sb = _self_orders(texts, max(orders))
    return float(np.mean([sb[n - 1] for n in orders]))


def distinct_score(texts: Sequence[Tokens], orders: Sequence[int] = ORDERS) -> float:
    vals = []
    for n in orders:
        try:
            vals.append(distinct_n(texts, n))
        except ValidationError:
            pass
    if not vals:
        raise ValidationError("texts too short for every n-gram order")
    return float(np.mean(vals))
