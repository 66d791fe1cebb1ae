"""Lexical diversity metrics: corpus BLEU, Self-BLEU and distinct-n.

BLEU uses clipped n-gram counts summed over the corpus, add-one smoothing
of the precisions for n >= 2, the closest reference length per sentence and
the usual brevity penalty. Scores are on a 0-100 scale.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Mapping, Sequence

Tokens = Sequence[str]


class MetricsError(ValueError):
    pass


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_profile(tokens: Tokens, max_n: int = 4) -> dict[int, Counter]:
    return {n: ngrams(tokens, n) for n in range(1, max_n + 1)}


def _sentence_stats(candidate: Tokens, references: Sequence[Tokens], max_n: int):
    matches, totals = [0] * max_n, [0] * max_n
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        best: Counter = Counter()
        for ref in references:
            best |= ngrams(ref, n)
        matches[n - 1] = sum(min(c, best[g]) for g, c in cand.items())
        totals[n - 1] = max(0, len(candidate) - n + 1)
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda rl: (abs(rl - c), rl)) if references else 0
    return matches, totals, c, r


def _score(matches, totals, c: int, r: int) -> float:
    if c == 0 or matches[0] == 0:
        return 0.0
    logs = [math.log(matches[0] / totals[0])]
    logs += [math.log((m + 1) / (t + 1)) for m, t in zip(matches[1:], totals[1:])]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    if len(candidates) != len(references):
        raise MetricsError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matches, totals, c_len, r_len = [0] * max_n, [0] * max_n, 0, 0
    for cand, refs in zip(candidates, references):
        m, t, c, r = _sentence_stats(list(cand), [list(x) for x in refs], max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c_len += c
        r_len += r
    return _score(matches, totals, c_len, r_len)


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> float:
    """BLEU of one candidate; an empty candidate scores 0."""
    return corpus_bleu([candidate], [references], max_n)


def self_bleu(pairs: Sequence[tuple[Tokens, Tokens]], max_n: int = 4) -> float:
    """Corpus BLEU of each paraphrase against its own source (lower is more diverse)."""
    if not pairs:
        raise MetricsError("self_bleu needs at least one (source, paraphrase) pair")
    return corpus_bleu([para for _, para in pairs], [[src] for src, _ in pairs], max_n)


def distinct_n(corpus: Iterable[Tokens], n: int) -> float:
    if n < 1:
        raise MetricsError("n must be >= 1")
    seen: set = set()
    total = 0
    for sent in corpus:
        grams = [tuple(sent[i:i + n]) for i in range(len(sent) - n + 1)]
        seen.update(grams)
        total += len(grams)
    return len(seen) / total if total else 0.0


def report(sources: Sequence[Tokens], candidates: Sequence[Tokens],
           external: Mapping[str, float] | None = None) -> dict:
    if len(sources) != len(candidates):
        raise MetricsError(f"{len(sources)} sources but {len(candidates)} candidates")
    out = {
        "self_bleu": self_bleu(list(zip(sources, candidates))),
        "distinct_1": distinct_n(candidates, 1),
        "distinct_2": distinct_n(candidates, 2),
    }
    if external:
        out["external"] = dict(external)
    return out
