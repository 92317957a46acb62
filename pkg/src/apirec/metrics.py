"""Evaluation metrics: cumulative BLEU, API-set precision/recall,
match-category distributions, and the Mann-Whitney U test.

BLEU here is the cumulative n-gram variant: uniform weights 1/n over
orders 1..n, a geometric mean of modified precisions, and a brevity
penalty of exp(1 - r/c) for candidates shorter than the reference.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum

from .corpus import ApiCall, ApiSequence


class MatchCategory(Enum):
    ALL_MATCH = "all"
    PARTIAL_MATCH = "partial"
    NO_MATCH = "no"


@dataclass(frozen=True, slots=True)
class BleuReport:
    """Cumulative BLEU-1..n scores with the quantities behind them."""

    scores: tuple[float, ...]
    precisions: tuple[float, ...]
    brevity_penalty: float
    candidate_len: int
    reference_len: int

    def score(self, n: int) -> float:
        if not 1 <= n <= len(self.scores):
            raise ValueError(f"no BLEU-{n} in a report of {len(self.scores)} orders")
        return self.scores[n - 1]

    @property
    def bleu_1(self) -> float:
        return self.score(1)

    @property
    def bleu_2(self) -> float:
        return self.score(2)

    @property
    def bleu_3(self) -> float:
        return self.score(3)

    @property
    def bleu_4(self) -> float:
        return self.score(4)


@dataclass(frozen=True, slots=True)
class PRReport:
    """Set precision/recall between predicted and target API sets."""

    precision: float
    recall: float
    n_predicted: int
    n_target: int
    n_matched: int


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate, reference, n: int, smoothing: bool = False) -> float:
    """Clipped n-gram precision: matches are capped at the reference count."""
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    cand = ngram_counts(candidate, n)
    total = sum(cand.values())
    if total == 0:
        return 0.0
    ref = ngram_counts(reference, n)
    clipped = sum(min(count, ref[gram]) for gram, count in cand.items())
    if smoothing:
        return (clipped + 1) / (total + 1)
    return clipped / total


def brevity_penalty(candidate_len: int, reference_len: int) -> float:
    """1 when the candidate is at least reference length, else exp(1 - r/c).

    An empty candidate gets penalty 0 rather than a division error.
    """
    if candidate_len < 0 or reference_len < 0:
        raise ValueError("lengths must be non-negative")
    if candidate_len == 0:
        return 0.0
    if candidate_len >= reference_len:
        return 1.0
    return math.exp(1.0 - reference_len / candidate_len)


def _cumulative_scores(precisions, bp: float) -> tuple[float, ...]:
    scores = []
    for k in range(1, len(precisions) + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
            continue
        mean_log = math.fsum(math.log(p) for p in precisions[:k]) / k
        scores.append(bp * math.exp(mean_log))
    return tuple(scores)


def bleu(candidate, reference, n: int = 4, smoothing: bool = False) -> BleuReport:
    """Sentence-level cumulative BLEU-1..n.

    If any order's precision is zero the cumulative score at and beyond
    that order is zero (no smoothing unless requested).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    candidate = list(candidate)
    reference = list(reference)
    precisions = tuple(modified_precision(candidate, reference, k, smoothing)
                       for k in range(1, n + 1))
    bp = brevity_penalty(len(candidate), len(reference))
    return BleuReport(_cumulative_scores(precisions, bp), precisions, bp,
                      len(candidate), len(reference))


def corpus_bleu(pairs, n: int = 4, smoothing: bool = False) -> BleuReport:
    """Corpus-level cumulative BLEU: clip counts and lengths are pooled
    across the corpus before the geometric mean and brevity penalty."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    clipped = [0] * n
    totals = [0] * n
    cand_len = 0
    ref_len = 0
    for candidate, reference in pairs:
        candidate = list(candidate)
        reference = list(reference)
        cand_len += len(candidate)
        ref_len += len(reference)
        for k in range(1, n + 1):
            counts = ngram_counts(candidate, k)
            refs = ngram_counts(reference, k)
            totals[k - 1] += sum(counts.values())
            clipped[k - 1] += sum(min(c, refs[g]) for g, c in counts.items())
    if smoothing:
        precisions = tuple((c + 1) / (t + 1) if t else 0.0
                           for c, t in zip(clipped, totals))
    else:
        precisions = tuple(c / t if t else 0.0 for c, t in zip(clipped, totals))
    bp = brevity_penalty(cand_len, ref_len)
    return BleuReport(_cumulative_scores(precisions, bp), precisions, bp,
                      cand_len, ref_len)


def mean_sentence_bleu(pairs, n: int = 4, smoothing: bool = False) -> float:
    """Mean of per-sentence cumulative BLEU-n, for sensitivity analysis."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no sentence pairs to average")
    return math.fsum(bleu(c, r, n, smoothing).score(n) for c, r in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# API-set metrics
# ---------------------------------------------------------------------------


def _as_api_set(value) -> frozenset[ApiCall]:
    if isinstance(value, ApiSequence):
        return value.as_set()
    return frozenset(value)


def precision_recall(predicted, target) -> PRReport:
    """Set precision/recall over deduplicated API sets.

    ``predicted`` may be empty (precision and recall are then 0); both
    arguments accept an :class:`ApiSequence` or any iterable of calls.
    """
    pred = _as_api_set(predicted)
    targ = _as_api_set(target)
    matched = pred & targ
    precision = len(matched) / len(pred) if pred else 0.0
    recall = len(matched) / len(targ) if targ else 0.0
    return PRReport(precision, recall, len(pred), len(targ), len(matched))


def categorize_match(target_apis, answer_apis) -> MatchCategory:
    """Three-way relation between a target API set and an answer API set."""
    target = _as_api_set(target_apis)
    answer = _as_api_set(answer_apis)
    common = target & answer
    if not common:
        return MatchCategory.NO_MATCH
    if target <= answer:
        return MatchCategory.ALL_MATCH
    return MatchCategory.PARTIAL_MATCH


def match_distribution(categories) -> dict[MatchCategory, float]:
    """Fraction of each match category; fractions sum to 1."""
    categories = list(categories)
    if not categories:
        raise ValueError("cannot compute a distribution over zero categories")
    counts = Counter(categories)
    return {cat: counts.get(cat, 0) / len(categories) for cat in MatchCategory}


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------


def _rank_with_ties(values) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def _u_statistic(a, b) -> float:
    """U for sample ``a``: wins count 1, ties 0.5."""
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def _exact_two_sided_p(a, b) -> float:
    pooled = list(a) + list(b)
    n1 = len(a)
    nm = n1 * len(b)
    u_obs = _u_statistic(a, b)
    dev_obs = abs(u_obs - nm / 2)
    hits = 0
    total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        chosen = set(idx)
        ga = [pooled[i] for i in idx]
        gb = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        u = _u_statistic(ga, gb)
        total += 1
        # >= with a small slack so float noise never drops the observed value
        if abs(u - nm / 2) >= dev_obs - 1e-12:
            hits += 1
    return hits / total


def mann_whitney_u(scores_a, scores_b) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test; returns (U for sample a, p-value).

    Small samples (both sides <= 8) use exact enumeration of group
    assignments; larger ones use the tie-corrected normal approximation
    with continuity correction. Degenerate all-tied data yields p = 1.
    """
    a = list(scores_a)
    b = list(scores_b)
    if not a or not b:
        raise ValueError("both samples must be non-empty")
    n1, n2 = len(a), len(b)
    ranks = _rank_with_ties(a + b)
    u1 = sum(ranks[:n1]) - n1 * (n1 + 1) / 2

    if n1 <= 8 and n2 <= 8:
        return u1, _exact_two_sided_p(a, b)

    nm = n1 * n2
    n = n1 + n2
    tie_counts = Counter(a + b).values()
    tie_term = sum(t ** 3 - t for t in tie_counts)
    variance = nm / 12 * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        return u1, 1.0
    # continuity correction of 0.5 toward the mean
    dev = abs(u1 - nm / 2)
    z = max(dev - 0.5, 0.0) / math.sqrt(variance)
    p = math.erfc(z / math.sqrt(2))
    return u1, min(p, 1.0)
