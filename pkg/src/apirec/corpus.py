"""Corpus handling: annotation/API-sequence pairs and Q&A posts.

Record files are UTF-8 JSON lines. A pairs file carries ``id``,
``annotation`` and ``apis`` (list of canonical ``Class.method`` strings);
a posts file carries ``id``, ``title`` and ``answer_apis``. Loading is
strict by default: the first bad line aborts with its line number.
"""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError, MalformedApiError, RecordError

log = logging.getLogger(__name__)

_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Collapse runs of whitespace to single spaces and trim."""
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True, slots=True)
class ApiCall:
    """One API invocation, canonically rendered as ``class_name.method_name``."""

    class_name: str
    method_name: str

    def __post_init__(self):
        for part in (self.class_name, self.method_name):
            if not part or _WS_RE.search(part) or "." in part:
                raise MalformedApiError(
                    f"bad API call part {part!r} (empty, whitespace, or dotted)"
                )

    def render(self) -> str:
        return f"{self.class_name}.{self.method_name}"

    def __str__(self) -> str:
        return self.render()


def parse_api_call(text: str) -> ApiCall:
    """Parse a dotted identifier into an ``ApiCall``.

    The split happens at the last dot; any package prefix before the class
    name is stripped, so ``java.lang.Float.parseFloat`` parses the same as
    ``Float.parseFloat``.
    """
    if "." not in text:
        raise MalformedApiError(f"no dot in API identifier {text!r}")
    head, _, method = text.rpartition(".")
    # keep only the last component of the qualifier as the class name
    cls = head.rpartition(".")[2]
    if not cls or not method or _WS_RE.search(cls) or _WS_RE.search(method):
        raise MalformedApiError(f"malformed API identifier {text!r}")
    return ApiCall(cls, method)


@dataclass(frozen=True, slots=True)
class ApiSequence:
    """An ordered API invocation chain. Order matters; repeats are allowed."""

    calls: tuple[ApiCall, ...]

    def __post_init__(self):
        if len(self.calls) < 1:
            raise DataError("API sequence must contain at least one call")

    @staticmethod
    def from_strings(strings) -> "ApiSequence":
        return ApiSequence(tuple(parse_api_call(s) for s in strings))

    def as_set(self) -> frozenset[ApiCall]:
        return frozenset(self.calls)

    def render(self) -> str:
        return " ".join(c.render() for c in self.calls)

    def renderings(self) -> list[str]:
        return [c.render() for c in self.calls]

    def __len__(self) -> int:
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)


@dataclass(frozen=True, slots=True)
class AnnotationPair:
    """A natural-language annotation with its ground-truth API sequence."""

    id: str
    annotation: str
    target: ApiSequence

    def __post_init__(self):
        object.__setattr__(self, "annotation", normalize_text(self.annotation))
        if not self.annotation:
            raise DataError(f"pair {self.id!r} has an empty annotation")


@dataclass(frozen=True, slots=True)
class QAPost:
    """A Q&A post: title plus the APIs mentioned in its accepted answer.

    ``answer_apis`` keeps first-mention order but holds no duplicates;
    set-style queries go through :meth:`api_set`.
    """

    id: str
    title: str
    answer_apis: tuple[ApiCall, ...]

    def __post_init__(self):
        object.__setattr__(self, "title", normalize_text(self.title))
        if not self.title:
            raise DataError(f"post {self.id!r} has an empty title")
        deduped = tuple(dict.fromkeys(self.answer_apis))
        object.__setattr__(self, "answer_apis", deduped)

    def api_set(self) -> frozenset[ApiCall]:
        return frozenset(self.answer_apis)


@dataclass(frozen=True, slots=True)
class ApiVocabulary:
    """APIs mentioned in at least ``min_frequency`` distinct posts."""

    entries: frozenset[ApiCall]
    min_frequency: int = 5

    def __contains__(self, call: ApiCall) -> bool:
        return call in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, slots=True)
class CorpusSplit:
    """An 8:1:1 train/valid/test partition with its shuffle seed."""

    train: tuple[AnnotationPair, ...]
    valid: tuple[AnnotationPair, ...]
    test: tuple[AnnotationPair, ...]
    seed: int = 0

    def all_pairs(self) -> tuple[AnnotationPair, ...]:
        return self.train + self.valid + self.test


# ---------------------------------------------------------------------------
# Record file IO
# ---------------------------------------------------------------------------


def _iter_records(path, strict: bool):
    path = Path(path)
    if not path.exists():
        raise DataError(f"record file not found: {path}")
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("record is not an object")
            except ValueError as exc:
                err = RecordError(path, line_no, f"bad JSON: {exc}")
                if strict:
                    raise err from None
                log.warning("skipping record: %s", err)
                continue
            yield line_no, record


def _record_field(record, name, path, line_no):
    if name not in record:
        raise RecordError(path, line_no, f"missing field {name!r}")
    return record[name]


def load_pairs(path, strict: bool = True) -> list[AnnotationPair]:
    """Load annotation/API-sequence pairs from a JSONL file.

    In strict mode the first malformed line raises :class:`RecordError`
    naming the line; otherwise bad lines are skipped with a warning.
    """
    pairs: list[AnnotationPair] = []
    seen_ids: set[str] = set()
    for line_no, record in _iter_records(path, strict):
        try:
            pair_id = str(_record_field(record, "id", path, line_no))
            if pair_id in seen_ids:
                raise RecordError(path, line_no, f"duplicate pair id {pair_id!r}")
            annotation = _record_field(record, "annotation", path, line_no)
            apis = _record_field(record, "apis", path, line_no)
            if not isinstance(apis, list) or not apis:
                raise RecordError(path, line_no, "field 'apis' must be a non-empty list")
            pair = AnnotationPair(pair_id, str(annotation), ApiSequence.from_strings(apis))
        except RecordError:
            if strict:
                raise
            log.warning("skipping record at %s:%d", path, line_no)
            continue
        except DataError as exc:
            err = RecordError(path, line_no, str(exc))
            if strict:
                raise err from None
            log.warning("skipping record: %s", err)
            continue
        seen_ids.add(pair.id)
        pairs.append(pair)
    return pairs


def load_posts(path, strict: bool = True) -> list[QAPost]:
    """Load Q&A posts from a JSONL file. Duplicate answer APIs collapse."""
    posts: list[QAPost] = []
    seen_ids: set[str] = set()
    for line_no, record in _iter_records(path, strict):
        try:
            post_id = str(_record_field(record, "id", path, line_no))
            if post_id in seen_ids:
                raise RecordError(path, line_no, f"duplicate post id {post_id!r}")
            title = _record_field(record, "title", path, line_no)
            apis = _record_field(record, "answer_apis", path, line_no)
            if not isinstance(apis, list):
                raise RecordError(path, line_no, "field 'answer_apis' must be a list")
            post = QAPost(post_id, str(title), tuple(parse_api_call(s) for s in apis))
        except RecordError:
            if strict:
                raise
            log.warning("skipping record at %s:%d", path, line_no)
            continue
        except DataError as exc:
            err = RecordError(path, line_no, str(exc))
            if strict:
                raise err from None
            log.warning("skipping record: %s", err)
            continue
        seen_ids.add(post.id)
        posts.append(post)
    return posts


def _dump(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(_dump({"id": p.id, "annotation": p.annotation,
                           "apis": p.target.renderings()}) + "\n")


def write_posts(path, posts) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in posts:
            f.write(_dump({"id": p.id, "title": p.title,
                           "answer_apis": [c.render() for c in p.answer_apis]}) + "\n")


def write_vocabulary(path, vocab: ApiVocabulary) -> None:
    """One canonical API string per line, sorted lexicographically."""
    lines = sorted(c.render() for c in vocab.entries)
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(line + "\n" for line in lines))


def load_vocabulary(path, min_frequency: int = 5) -> ApiVocabulary:
    with open(path, encoding="utf-8") as f:
        entries = frozenset(parse_api_call(line.strip()) for line in f if line.strip())
    return ApiVocabulary(entries, min_frequency)


# ---------------------------------------------------------------------------
# Corpus construction
# ---------------------------------------------------------------------------


def build_vocabulary(posts, min_frequency: int = 5) -> ApiVocabulary:
    """Keep APIs mentioned in at least ``min_frequency`` posts.

    An API counts once per post no matter how often the post repeats it.
    """
    if min_frequency < 1:
        raise ValueError(f"min_frequency must be >= 1, got {min_frequency}")
    counts: Counter[ApiCall] = Counter()
    for post in posts:
        counts.update(post.api_set())
    entries = frozenset(c for c, n in counts.items() if n >= min_frequency)
    return ApiVocabulary(entries, min_frequency)


def filter_pairs(pairs, vocab: ApiVocabulary) -> list[AnnotationPair]:
    """Drop every pair whose target uses any API outside the vocabulary."""
    return [p for p in pairs if p.target.as_set() <= vocab.entries]


def dedup_pairs(pairs) -> list[AnnotationPair]:
    """Keep the first occurrence of each (annotation, target) combination."""
    seen: set[tuple[str, str]] = set()
    kept: list[AnnotationPair] = []
    for p in pairs:
        key = (p.annotation, p.target.render())
        if key in seen:
            continue
        seen.add(key)
        kept.append(p)
    return kept


def split_corpus(pairs, seed: int) -> CorpusSplit:
    """Shuffle under ``seed`` and partition 8:1:1.

    Valid and test sizes differ by at most one; the same seed always
    produces the identical split.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n < 10:
        raise DataError(f"need at least 10 pairs to split 8:1:1, got {n}")
    rng = random.Random(seed)
    rng.shuffle(pairs)
    n_train = (8 * n) // 10
    rest = n - n_train
    n_valid = rest // 2
    return CorpusSplit(
        train=tuple(pairs[:n_train]),
        valid=tuple(pairs[n_train:n_train + n_valid]),
        test=tuple(pairs[n_train + n_valid:]),
        seed=seed,
    )
