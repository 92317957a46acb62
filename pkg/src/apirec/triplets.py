"""Triplet mining for contrastive training of the post linker.

A post is a positive for an annotation when the overlap rate between the
annotation's target API set and the post's answer APIs reaches the
threshold (default 0.75); negatives are drawn uniformly from posts with
near-zero overlap (default < 0.01). Each annotation contributes up to
p x n (anchor, positive title, negative title) triplets.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .corpus import AnnotationPair, ApiCall, ApiSequence, QAPost
from .errors import DataError
from .util import derive_seed

DEFAULT_POSITIVE_THRESHOLD = 0.75
DEFAULT_NEGATIVE_MAX_RATE = 0.01


@dataclass(frozen=True, slots=True)
class OverlapScore:
    """Fraction of the target API set mentioned by a post's answer."""

    value: float
    matched: frozenset[ApiCall]
    target_size: int


@dataclass(frozen=True, slots=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    positive_post_id: str
    negative_post_id: str

    def __post_init__(self):
        if self.positive_post_id == self.negative_post_id:
            raise DataError("triplet positive and negative must be distinct posts")
        if not (self.anchor and self.positive and self.negative):
            raise DataError("triplet texts must be non-empty")


@dataclass(frozen=True, slots=True)
class LabeledPair:
    left: str
    right: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")


def overlap_rate(target: ApiSequence, post: QAPost) -> OverlapScore:
    """Compute |target set ∩ answer APIs| / |target set|."""
    target_set = target.as_set()
    if not target_set:
        raise DataError("cannot compute overlap rate for an empty target")
    matched = target_set & post.api_set()
    return OverlapScore(len(matched) / len(target_set), frozenset(matched), len(target_set))


def find_positives(pair: AnnotationPair, posts,
                   threshold: float = DEFAULT_POSITIVE_THRESHOLD) -> list[QAPost]:
    """All posts whose overlap rate reaches the threshold, best first.

    The threshold is inclusive; ties are broken by post id.
    """
    scored = [(overlap_rate(pair.target, post).value, post) for post in posts]
    hits = [(rate, post) for rate, post in scored if rate >= threshold]
    hits.sort(key=lambda rp: (-rp[0], rp[1].id))
    return [post for _, post in hits]


def find_negatives(pair: AnnotationPair, posts, max_rate: float = DEFAULT_NEGATIVE_MAX_RATE,
                   count: int = 10, seed: int = 0) -> list[QAPost]:
    """Sample ``count`` posts with overlap rate below ``max_rate``.

    Sampling is uniform without replacement and deterministic under
    ``seed``; when fewer posts qualify, all of them are returned.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    eligible = [p for p in posts if overlap_rate(pair.target, p).value < max_rate]
    eligible.sort(key=lambda p: p.id)
    if len(eligible) <= count:
        return eligible
    return random.Random(seed).sample(eligible, count)


def generate_triplets(pair: AnnotationPair, posts, p: int = 10, n: int = 10,
                      threshold: float = DEFAULT_POSITIVE_THRESHOLD,
                      max_rate: float = DEFAULT_NEGATIVE_MAX_RATE,
                      seed: int = 0) -> list[Triplet]:
    """Emit all combinations of up to ``p`` positives with up to ``n`` negatives.

    When an annotation has more than ``p`` positives, a uniform random
    subset of size ``p`` is kept. An annotation without positives yields
    no triplets (the caller discards it).
    """
    positives = find_positives(pair, posts, threshold)
    if not positives:
        return []
    if len(positives) > p:
        positives = random.Random(derive_seed(seed, "positives")).sample(positives, p)
    negatives = find_negatives(pair, posts, max_rate, n, derive_seed(seed, "negatives"))
    return [
        Triplet(pair.annotation, pos.title, neg.title, pos.id, neg.id)
        for pos in positives
        for neg in negatives
    ]


def mine_triplets(pairs, posts, p: int = 10, n: int = 10,
                  threshold: float = DEFAULT_POSITIVE_THRESHOLD,
                  max_rate: float = DEFAULT_NEGATIVE_MAX_RATE,
                  seed: int = 0) -> tuple[list[Triplet], int]:
    """Mine triplets for a whole collection of annotation pairs.

    Each annotation samples under its own seed derived from the global
    seed and its id, so sharded runs agree with serial ones. Returns the
    triplets plus the number of discarded (positive-free) annotations.
    """
    triplets: list[Triplet] = []
    discarded = 0
    for pair in pairs:
        got = generate_triplets(pair, posts, p, n, threshold, max_rate,
                                seed=derive_seed(seed, pair.id))
        if not got:
            discarded += 1
        triplets.extend(got)
    return triplets, discarded


def to_labeled_pairs(triplets) -> list[LabeledPair]:
    """Flatten triplets into (text, text, 0/1) pairs, deduplicated."""
    out: dict[tuple[str, str, int], None] = {}
    for t in triplets:
        out.setdefault((t.anchor, t.positive, 1), None)
        out.setdefault((t.anchor, t.negative, 0), None)
    return [LabeledPair(*key) for key in out]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_triplets(path, triplets) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triplets:
            f.write(json.dumps({
                "anchor": t.anchor, "positive": t.positive, "negative": t.negative,
                "positive_post_id": t.positive_post_id,
                "negative_post_id": t.negative_post_id,
            }, ensure_ascii=False, sort_keys=True) + "\n")


def load_triplets(path) -> list[Triplet]:
    triplets = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            triplets.append(Triplet(r["anchor"], r["positive"], r["negative"],
                                    r["positive_post_id"], r["negative_post_id"]))
    return triplets


def write_labeled_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"left": p.left, "right": p.right, "label": p.label},
                               ensure_ascii=False, sort_keys=True) + "\n")


def load_labeled_pairs(path) -> list[LabeledPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            pairs.append(LabeledPair(r["left"], r["right"], int(r["label"])))
    return pairs
