"""Corpus-level BLEU-4 with brevity penalty and add-epsilon smoothing.

Standard BLEU: clipped n-gram precisions pooled over the corpus for n = 1..4,
geometric mean, multiplied by the brevity penalty. Any empty or zero n-gram
count is replaced by a small epsilon so the score stays defined (and well
below 1 BLEU point when 4-gram overlap is absent everywhere).
"""

from __future__ import annotations

import math
from collections import Counter

MAX_ORDER = 4
SMOOTH_EPS = 1e-9


class BleuError(ValueError):
    pass


def _ngrams(tokens, order):
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(hypotheses, references) -> float:
    """BLEU in [0, 100] over token-list corpora of equal length."""
    if len(hypotheses) != len(references):
        raise BleuError(f"corpus size mismatch: {len(hypotheses)} hypotheses vs "
                        f"{len(references)} references")
    if not hypotheses:
        raise BleuError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for order in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, order)
            ref_counts = _ngrams(ref, order)
            totals[order - 1] += max(len(hyp) - order + 1, 0)
            matches[order - 1] += sum(min(c, ref_counts[g])
                                      for g, c in hyp_counts.items())
    log_prec = 0.0
    for m, t in zip(matches, totals):
        p = m / t if t > 0 and m > 0 else SMOOTH_EPS
        log_prec += math.log(p) / MAX_ORDER
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)
