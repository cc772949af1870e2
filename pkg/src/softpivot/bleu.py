"""Corpus BLEU on pre-tokenised text with exponential smoothing of empty n-gram orders."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass
class BleuReport:
    score: float
    precisions: list[float]  # percent, after smoothing
    bp: float
    sys_len: int
    ref_len: int
    counts: list[int]
    totals: list[int]

    def __str__(self) -> str:
        prec = "/".join(f"{p:.1f}" for p in self.precisions)
        return f"BLEU = {self.score:.2f} {prec} (BP = {self.bp:.3f} hyp_len = {self.sys_len} ref_len = {self.ref_len})"


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_order: int = 4) -> BleuReport:
    """Geometric mean of clipped n-gram precisions times the brevity penalty, x100.

    An order with zero matches gets precision ``1 / (2**k * total)`` where
    ``k`` counts the zero-match orders seen so far; an order with no n-grams
    at all makes the score 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu: empty corpus")
    counts = [0] * max_order
    totals = [0] * max_order
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            counts[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if sys_len == 0 or not any(counts):
        return BleuReport(0.0, [0.0] * max_order, 0.0 if sys_len == 0 else 1.0, sys_len, ref_len, counts, totals)
    precisions = []
    smooth = 1.0
    for c, t in zip(counts, totals):
        if t == 0:
            # hypotheses too short to hold any n-gram of this order
            precisions.append(0.0)
        elif c == 0:
            smooth *= 2
            precisions.append(100.0 / (smooth * t))
        else:
            precisions.append(100.0 * c / t)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    if 0.0 in precisions:
        return BleuReport(0.0, precisions, bp, sys_len, ref_len, counts, totals)
    score = bp * math.exp(sum(math.log(p / 100.0) for p in precisions) / max_order) * 100.0
    return BleuReport(score, precisions, bp, sys_len, ref_len, counts, totals)
