"""Corpus metrics: BLEU-4, shift-free translation error rate, token accuracy.

The BLEU here is corpus-level with clipped n-gram counts, brevity penalty,
and add-one smoothing applied to the n >= 2 precisions (the unigram precision
is never smoothed). The error rate is a plain word-level Levenshtein distance
over the reference length; block shifts are deliberately not searched, hence
the `_noshift` suffix.
"""

from __future__ import annotations

import math
from collections import Counter

from .core import DataError

MAX_BLEU_ORDER = 4


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Corpus BLEU-4 in [0, 1]."""
    if len(hypotheses) != len(references):
        raise DataError(
            f"corpus size mismatch: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references")
    if not hypotheses:
        raise DataError("empty corpus")
    for ref in references:
        if not ref:
            raise DataError("empty reference")

    matches = [0] * (MAX_BLEU_ORDER + 1)
    totals = [0] * (MAX_BLEU_ORDER + 1)
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_BLEU_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            totals[n] += sum(hyp_counts.values())
            matches[n] += sum(min(c, ref_counts[gram])
                              for gram, c in hyp_counts.items())

    if totals[1] == 0 or matches[1] == 0:
        return 0.0
    log_sum = math.log(matches[1] / totals[1])
    for n in range(2, MAX_BLEU_ORDER + 1):
        log_sum += math.log((matches[n] + 1) / (totals[n] + 1))
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_sum / MAX_BLEU_ORDER)


def levenshtein(a: list[str], b: list[str]) -> int:
    """Word-level edit distance with unit substitution/insertion/deletion."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tok_b in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1,
                         cur[j - 1] + 1,
                         prev[j - 1] + (tok_a != tok_b))
        prev = cur
    return prev[-1]


def ter_noshift(hypothesis: list[str], reference: list[str]) -> float:
    """Word-level edit distance divided by the reference length."""
    if not reference:
        raise DataError("empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


def corpus_ter_noshift(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Total edit distance over total reference length."""
    if len(hypotheses) != len(references):
        raise DataError("corpus size mismatch")
    if not hypotheses:
        raise DataError("empty corpus")
    total_ref = sum(len(r) for r in references)
    if total_ref == 0:
        raise DataError("empty references")
    total_dist = sum(levenshtein(h, r) for h, r in zip(hypotheses, references))
    return total_dist / total_ref


def token_accuracy(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Position-wise matches over max(len) totals, corpus level."""
    if len(hypotheses) != len(references):
        raise DataError("corpus size mismatch")
    if not hypotheses:
        raise DataError("empty corpus")
    num = 0
    denom = 0
    for hyp, ref in zip(hypotheses, references):
        denom += max(len(hyp), len(ref))
        num += sum(h == r for h, r in zip(hyp, ref))
    return num / denom if denom else 1.0
