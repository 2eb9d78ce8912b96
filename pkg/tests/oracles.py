"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np
from nltk.translate.bleu_score import sentence_bleu as nltk_sentence_bleu
from scipy.stats import beta


def _add_one_smoothing(p_n, references, hypothesis, hyp_len=None, **kwargs):
    # NLTK clamps empty denominators to 1, so recompute the true count of
    # candidate n-grams before adding one to numerator and denominator.
    hyp_len = len(hypothesis) if hyp_len is None else hyp_len
    out = []
    for n, p in enumerate(p_n, start=1):
        if n == 1:
            out.append(p.numerator / p.denominator)
        else:
            out.append((p.numerator + 1) / (max(0, hyp_len - n + 1) + 1))
    return out


def nltk_bleu(candidate, references, max_n=4) -> float:
    weights = tuple([1.0 / max_n] * max_n)
    return float(nltk_sentence_bleu(list(references), list(candidate), weights=weights,
                                    smoothing_function=_add_one_smoothing))


def nltk_pairwise(texts, max_n=4) -> float:
    vals = [nltk_bleu(a, [b], max_n) for i, a in enumerate(texts) for j, b in enumerate(texts) if i != j]
    return 100.0 * float(np.mean(vals))


def nltk_self(texts, max_n=4) -> float:
    vals = [nltk_bleu(a, texts[:i] + texts[i + 1:], max_n) for i, a in enumerate(texts)]
    return 100.0 * float(np.mean(vals))


def nltk_averaged(texts, fn) -> float:
    return float(np.mean([fn(texts, n) for n in (1, 2, 3, 4)]))


def naive_distinct(texts, n) -> float:
    grams = [tuple(t[i:i + n]) for t in texts for i in range(len(t) - n + 1)]
    return 100.0 * len(set(grams)) / len(grams)


def naive_logdet_greedy(L: np.ndarray, k: int, floor: float) -> list[int]:
    """Greedy MAP by recomputing log det of every candidate subset from scratch."""
    n = L.shape[0]
    chosen: list[int] = []
    current = 0.0
    while len(chosen) < k:
        best, best_gain = None, -math.inf
        for j in range(n):
            if j in chosen:
                continue
            idx = chosen + [j]
            sign, logdet = np.linalg.slogdet(L[np.ix_(idx, idx)])
            gain = logdet - current if sign > 0 else -math.inf
            if gain > best_gain + 1e-12:
                best, best_gain = j, gain
        if best is None or math.exp(best_gain) <= floor:
            break
        chosen.append(best)
        current += best_gain
    return chosen


def clopper_pearson_lower(k: int, n: int, alpha: float = 0.025) -> float:
    return 0.0 if k == 0 else float(beta.ppf(alpha, k, n - k + 1))
