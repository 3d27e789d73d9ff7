"""BLEU, generation entropy and n-gram repetition metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dysi.errors import InputError

MAX_ORDER = 4


@dataclass
class MetricReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)
    entropy: float | None = None
    repetition: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
            "matches": self.matches,
            "totals": self.totals,
            "entropy": self.entropy,
            "repetition": {str(k): v for k, v in self.repetition.items()},
        }


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ref_set(r, tokenized: bool) -> list[list]:
    """Normalize one hypothesis's references to a list of token lists.

    For a string hypothesis ``r`` is a string or a list of strings.  For a
    tokenized hypothesis it is a token list or a list of token lists.
    """
    if isinstance(r, str):
        return [r.split()]
    r = list(r)
    if not tokenized or (r and isinstance(r[0], (list, tuple))):
        return [_tokens(x) for x in r]
    return [r]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: list[list]) -> int:
    if not refs:
        raise InputError("every hypothesis needs at least one reference")
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _sentence_stats(hyp: list, refs: list[list]):
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h = ngrams(hyp, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngrams(r, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches.append(sum(min(c, max_ref[g]) for g, c in h.items()))
        totals.append(max(0, len(hyp) - n + 1))
    return matches, totals, len(hyp), _closest_ref_len(len(hyp), refs)


def _brevity(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - r / c))


def corpus_bleu(hyps: Sequence, refs: Sequence) -> MetricReport:
    """BLEU-4 on a 0-100 scale with clipping against the max count over references.

    ``refs[i]`` holds one reference or a list of references for ``hyps[i]``,
    in the same form as the hypothesis (string or token list).
    """
    if len(hyps) == 0:
        raise InputError("empty corpus")
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        m, t, hl, rl = _sentence_stats(_tokens(hyp), _ref_set(ref, not isinstance(hyp, str)))
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c += hl
        r += rl
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = _brevity(c, r)
    if min(precisions) <= 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return MetricReport(bleu=bleu, precisions=precisions, brevity_penalty=bp, hyp_len=c,
                        ref_len=r, matches=matches, totals=totals)


def sentence_bleu(hyp, refs) -> float:
    """Sentence BLEU-4 (0-100) with add-one smoothing on orders 2..4."""
    refs = _ref_set(refs, not isinstance(hyp, str))
    hyp = _tokens(hyp)
    m, t, hl, rl = _sentence_stats(hyp, refs)
    if t[0] == 0 or m[0] == 0:
        return 0.0
    logs = [math.log(m[0] / t[0])]
    logs += [math.log((m[n] + 1) / (t[n] + 1)) for n in range(1, MAX_ORDER)]
    return 100.0 * _brevity(hl, rl) * math.exp(sum(logs) / MAX_ORDER)


def oracle_sentence_bleu(hyps: Sequence, multi_refs: Sequence) -> float:
    """Mean over hypotheses of the best smoothed sentence BLEU against any single reference."""
    if len(hyps) == 0:
        raise InputError("empty corpus")
    if len(hyps) != len(multi_refs):
        raise InputError(f"{len(hyps)} hypotheses but {len(multi_refs)} reference sets")
    scores = []
    for hyp, refs in zip(hyps, multi_refs):
        refs = _ref_set(refs, not isinstance(hyp, str))
        if not refs:
            raise InputError("every hypothesis needs at least one reference")
        scores.append(max(sentence_bleu(hyp, [r]) for r in refs))
    return float(np.mean(scores))


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each distribution along the last axis (0 log 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def generation_entropy(dists: Iterable) -> float:
    """Average per-step entropy over every decoding step in ``dists``."""
    total, count = 0.0, 0
    for d in dists:
        h = np.atleast_1d(row_entropy(np.atleast_2d(d)))
        total += float(h.sum())
        count += h.size
    return total / count if count else 0.0


def ngram_repetition_ratio(tokens, n: int) -> float:
    """1 - distinct/total n-grams; 0 when the text has fewer than ``n`` tokens."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = _tokens(tokens)
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    distinct = len({tuple(tokens[i:i + n]) for i in range(total)})
    return 1.0 - distinct / total


def repetition_ratio_difference(perturbed, original, n: int) -> float:
    return abs(ngram_repetition_ratio(perturbed, n) - ngram_repetition_ratio(original, n))
