"""Corpus-level BLEU: modified n-gram precisions and brevity penalty.

Counts are pooled over the whole corpus, precisions for n = 1..4 are combined
with uniform weights, and no smoothing is applied: a zero precision at any
order yields a score of exactly 0.
"""

from __future__ import annotations

import math
from typing import Sequence

from .errors import ContractError

Sentence = Sequence[str] | Sequence[int]


def _ngram_counts(tokens: Sentence, n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def corpus_bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence],
                max_n: int = 4) -> float:
    """BLEU in [0, 1] for one reference per hypothesis.

    Geometric mean of modified n-gram precisions (n = 1..max_n) times the
    brevity penalty exp(min(0, 1 - ref_len/hyp_len)).
    """
    if len(hypotheses) == 0:
        raise ContractError("corpus_bleu requires at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )

    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp, n)
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            for gram, count in hyp_counts.items():
                matched[n - 1] += min(count, ref_counts.get(gram, 0))

    if hyp_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0

    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    brevity = min(0.0, 1.0 - ref_len / hyp_len)
    return math.exp(brevity + log_precision)
