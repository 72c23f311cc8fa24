"""Sentence-level BLEU@1/BLEU@4 and ROUGE-L, reported on a 0-100 scale."""

from __future__ import annotations

import math
import re
from collections import Counter

_TOKEN = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, references: list[str], max_n: int = 4) -> float:
    """BLEU with clipped n-gram precision and the standard brevity penalty; no smoothing."""
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand or not any(refs):
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / max_n
    c = len(cand)
    # closest reference length, ties to the shorter one
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_p)


def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: list[str]) -> float:
    """Best LCS F1 over the references."""
    cand = tokenize(candidate)
    best = 0.0
    for ref in references:
        r = tokenize(ref)
        lcs = _lcs(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        best = max(best, 2 * p * rec / (p + rec))
    return 100.0 * best


def text_metrics(candidate: str, references: list[str]) -> tuple[float, float, float]:
    """(BLEU@1, BLEU@4, ROUGE-L)."""
    if not references or not any(tokenize(r) for r in references):
        raise ValueError("need a nonempty reference")
    if not tokenize(candidate):
        return 0.0, 0.0, 0.0
    return bleu(candidate, references, 1), bleu(candidate, references, 4), rouge_l(candidate, references)
