"""Two-stage annotation→post linking.

Stage one is a small trainable text embedder fit with a cosine triplet
margin loss; post titles are pre-embedded into an exact-search index and
the top-k titles by cosine similarity survive. Stage two is a text-pair
classifier trained on (annotation, title, 0/1) pairs whose probability
re-ranks the survivors; the top post after re-ranking is the link.

Both models are deliberately small (token embedding, masked mean
pooling, feed-forward head) so they train from scratch in seconds on
CPU. Anything exposing ``embed``/``score`` with the same contracts can
be dropped in instead, e.g. a pre-trained sentence encoder.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import load_container, save_container, tensors_hash
from .corpus import ApiSequence, QAPost
from .errors import DataError, EmptyIndexError, TrainingError
from .metrics import MatchCategory, categorize_match
from .text import word_tokens
from .util import derive_seed

PAD_ID = 0
UNK_ID = 1


class WordVocab:
    """Token→id map with reserved pad/unk ids."""

    def __init__(self, tokens: list[str]):
        self.itos = ["<pad>", "<unk>"] + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, token_lists) -> "WordVocab":
        freq: Counter[str] = Counter()
        for tokens in token_lists:
            freq.update(tokens)
        ordered = sorted(freq, key=lambda t: (-freq[t], t))
        return cls(ordered)

    def encode(self, tokens) -> list[int]:
        ids = [self.stoi.get(t, UNK_ID) for t in tokens]
        return ids or [UNK_ID]

    def __len__(self) -> int:
        return len(self.itos)


def _pad_batch(id_lists) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(ids) for ids in id_lists)
    ids = torch.full((len(id_lists), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(id_lists), width), dtype=torch.float32)
    for row, seq in enumerate(id_lists):
        ids[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[row, :len(seq)] = 1.0
    return ids, mask


class _PooledTextNet(nn.Module):
    """Token embedding + masked mean pooling + linear head, L2-normalized."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.proj = nn.Linear(dim, dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        embedded = self.emb(ids) * mask.unsqueeze(-1)
        pooled = embedded.sum(1) / mask.sum(1).clamp(min=1.0).unsqueeze(-1)
        return F.normalize(self.proj(pooled), dim=-1, eps=1e-12)


@dataclass(frozen=True, slots=True)
class EmbedderConfig:
    dim: int = 64
    margin: float = 0.3
    epochs: int = 15
    lr: float = 0.02
    batch_size: int = 128
    seed: int = 0


class TextEmbedder:
    """Trained filtering embedder; immutable after training."""

    def __init__(self, vocab: WordVocab, net: _PooledTextNet, config: EmbedderConfig,
                 epoch_losses: tuple[float, ...] = ()):
        self.vocab = vocab
        self.net = net.eval()
        self.config = config
        self.epoch_losses = epoch_losses

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed_many(self, texts) -> np.ndarray:
        id_lists = [self.vocab.encode(word_tokens(t)) for t in texts]
        ids, mask = _pad_batch(id_lists)
        with torch.no_grad():
            out = self.net(ids, mask)
        return out.numpy().astype(np.float32, copy=True)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def parameter_hash(self) -> str:
        meta = {"dim": self.config.dim, "vocab_size": len(self.vocab)}
        return tensors_hash(meta, self.state_tensors())


def embed(model: TextEmbedder, text: str) -> np.ndarray:
    """Unit-norm embedding of a text under a trained embedder."""
    return model.embed(text)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def train_embedder(triplets, config: EmbedderConfig = EmbedderConfig()) -> TextEmbedder:
    """Fit the filtering embedder with the cosine triplet margin loss
    max(0, margin - cos(anchor, positive) + cos(anchor, negative))."""
    triplets = list(triplets)
    if not triplets:
        raise TrainingError("empty training set: no triplets to train the embedder on")
    texts = [t.anchor for t in triplets] + [t.positive for t in triplets] \
        + [t.negative for t in triplets]
    vocab = WordVocab.build(word_tokens(t) for t in texts)

    torch.manual_seed(config.seed)
    net = _PooledTextNet(len(vocab), config.dim)
    encoded = [(vocab.encode(word_tokens(t.anchor)),
                vocab.encode(word_tokens(t.positive)),
                vocab.encode(word_tokens(t.negative))) for t in triplets]

    losses: list[float] = []
    if config.epochs > 0:
        opt = torch.optim.Adam(net.parameters(), lr=config.lr)
        order = list(range(len(encoded)))
        net.train()
        for epoch in range(config.epochs):
            random.Random(derive_seed(config.seed, "embedder-order", epoch)).shuffle(order)
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                va = net(*_pad_batch([encoded[i][0] for i in chunk]))
                vp = net(*_pad_batch([encoded[i][1] for i in chunk]))
                vn = net(*_pad_batch([encoded[i][2] for i in chunk]))
                cos_ap = (va * vp).sum(-1)
                cos_an = (va * vn).sum(-1)
                loss = torch.relu(config.margin - cos_ap + cos_an).mean()
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite embedder loss at epoch {epoch}: {loss.item()!r}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
            losses.append(total / len(order))
    return TextEmbedder(vocab, net, config, tuple(losses))


# ---------------------------------------------------------------------------
# Retrieval index and filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RankedPost:
    post: QAPost
    filter_similarity: float
    rerank_score: float | None = None


@dataclass(frozen=True, slots=True)
class PostIndex:
    """Exact-search index of normalized title embeddings."""

    post_ids: tuple[str, ...]
    vectors: np.ndarray
    embedder_hash: str
    posts: tuple[QAPost, ...]

    def __len__(self) -> int:
        return len(self.post_ids)


def build_index(embedder: TextEmbedder, posts) -> PostIndex:
    posts = tuple(posts)
    if not posts:
        raise EmptyIndexError("cannot build an index over zero posts")
    vectors = embedder.embed_many([p.title for p in posts])
    return PostIndex(tuple(p.id for p in posts), vectors,
                     embedder.parameter_hash(), posts)


def save_index(path, index: PostIndex) -> None:
    meta = {"embedder_hash": index.embedder_hash, "dim": int(index.vectors.shape[1]),
            "count": len(index), "post_ids": list(index.post_ids)}
    save_container(path, "post_index", meta, {"vectors": index.vectors})


def load_index(path, posts) -> PostIndex:
    _, meta, tensors = load_container(path, expect_kind="post_index")
    by_id = {p.id: p for p in posts}
    missing = [pid for pid in meta["post_ids"] if pid not in by_id]
    if missing:
        raise DataError(f"index references unknown post ids, e.g. {missing[0]!r}")
    ordered = tuple(by_id[pid] for pid in meta["post_ids"])
    return PostIndex(tuple(meta["post_ids"]), tensors["vectors"],
                     meta["embedder_hash"], ordered)


def filter_top_k(embedder: TextEmbedder, annotation: str, posts, k: int = 10) -> list[RankedPost]:
    """The k posts whose titles are most cosine-similar to the annotation.

    ``posts`` may be a prebuilt :class:`PostIndex` or any collection of
    posts (an ephemeral index is built). Ties break by post id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(posts, PostIndex):
        index = posts
        if index.embedder_hash != embedder.parameter_hash():
            raise DataError("post index is stale: built under a different embedder")
    else:
        index = build_index(embedder, posts)
    if len(index) == 0:
        raise EmptyIndexError("cannot filter against an empty post index")
    query = embedder.embed(annotation)
    sims = index.vectors.astype(np.float64) @ query.astype(np.float64)
    sims = np.clip(sims, -1.0, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.post_ids[i]))
    return [RankedPost(index.posts[i], float(sims[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# Re-ranking classifier
# ---------------------------------------------------------------------------


class _PairNet(nn.Module):
    """Joint text-pair scorer over pooled embeddings of both texts."""

    def __init__(self, vocab_size: int, dim: int, hidden: int):
        super().__init__()
        self.emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.head = nn.Sequential(nn.Linear(4 * dim, hidden), nn.ReLU(),
                                  nn.Linear(hidden, 1))

    def _pool(self, ids, mask):
        embedded = self.emb(ids) * mask.unsqueeze(-1)
        return embedded.sum(1) / mask.sum(1).clamp(min=1.0).unsqueeze(-1)

    def forward(self, left_ids, left_mask, right_ids, right_mask) -> torch.Tensor:
        u = self._pool(left_ids, left_mask)
        v = self._pool(right_ids, right_mask)
        features = torch.cat([u, v, torch.abs(u - v), u * v], dim=-1)
        return self.head(features).squeeze(-1)


@dataclass(frozen=True, slots=True)
class ClassifierConfig:
    dim: int = 64
    hidden: int = 64
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 128
    seed: int = 0


class PairClassifier:
    """Trained re-ranking scorer; ``score`` is a probability of relevance."""

    def __init__(self, vocab: WordVocab, net: _PairNet, config: ClassifierConfig,
                 epoch_losses: tuple[float, ...] = (), train_accuracy: float = 0.0):
        self.vocab = vocab
        self.net = net.eval()
        self.config = config
        self.epoch_losses = epoch_losses
        self.train_accuracy = train_accuracy

    def score_many(self, pairs) -> np.ndarray:
        lefts, rights = zip(*pairs)
        li, lm = _pad_batch([self.vocab.encode(word_tokens(t)) for t in lefts])
        ri, rm = _pad_batch([self.vocab.encode(word_tokens(t)) for t in rights])
        with torch.no_grad():
            logits = self.net(li, lm, ri, rm)
        return torch.sigmoid(logits).numpy().astype(np.float64, copy=True)

    def score(self, left: str, right: str) -> float:
        return float(self.score_many([(left, right)])[0])

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}


def train_classifier(labeled_pairs, config: ClassifierConfig = ClassifierConfig()) -> PairClassifier:
    """Fit the re-ranking classifier on (left, right, 0/1) pairs."""
    labeled_pairs = list(labeled_pairs)
    if not labeled_pairs:
        raise TrainingError("empty training set: no labeled pairs")
    labels = {p.label for p in labeled_pairs}
    if len(labels) < 2:
        raise TrainingError(
            f"single-class input: all labels are {labels.pop()}, need both 0 and 1")
    vocab = WordVocab.build(word_tokens(t) for p in labeled_pairs
                            for t in (p.left, p.right))

    torch.manual_seed(derive_seed(config.seed, "classifier"))
    net = _PairNet(len(vocab), config.dim, config.hidden)
    encoded = [(vocab.encode(word_tokens(p.left)), vocab.encode(word_tokens(p.right)),
                float(p.label)) for p in labeled_pairs]

    losses: list[float] = []
    accuracy = 0.0
    if config.epochs > 0:
        opt = torch.optim.Adam(net.parameters(), lr=config.lr)
        order = list(range(len(encoded)))
        net.train()
        for epoch in range(config.epochs):
            random.Random(derive_seed(config.seed, "classifier-order", epoch)).shuffle(order)
            total = 0.0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                li, lm = _pad_batch([encoded[i][0] for i in chunk])
                ri, rm = _pad_batch([encoded[i][1] for i in chunk])
                y = torch.tensor([encoded[i][2] for i in chunk])
                logits = net(li, lm, ri, rm)
                loss = F.binary_cross_entropy_with_logits(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite classifier loss at epoch {epoch}: {loss.item()!r}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
                correct += int(((logits > 0) == (y > 0.5)).sum().item())
            losses.append(total / len(order))
            accuracy = correct / len(order)
    return PairClassifier(vocab, net, config, tuple(losses), accuracy)


def rerank(classifier: PairClassifier, annotation: str, candidates) -> list[RankedPost]:
    """Score each candidate with the classifier and sort by that probability.

    Ties break by filter similarity (descending) then post id.
    """
    candidates = list(candidates)
    if not candidates:
        return []
    scores = classifier.score_many([(annotation, c.post.title) for c in candidates])
    rescored = [replace(c, rerank_score=float(s)) for c, s in zip(candidates, scores)]
    rescored.sort(key=lambda c: (-c.rerank_score, -c.filter_similarity, c.post.id))
    return rescored


def link(embedder: TextEmbedder, classifier: PairClassifier, annotation: str,
         posts, k: int = 10) -> RankedPost:
    """Full two-stage retrieval: cosine top-k filter, then probability re-rank."""
    return rerank(classifier, annotation, filter_top_k(embedder, annotation, posts, k))[0]


def categorize_link(target: ApiSequence, linked: QAPost) -> MatchCategory:
    """All/Partial/No match between the target API set and the linked answer."""
    return categorize_match(target.as_set(), linked.api_set())


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_embedder(path, model: TextEmbedder) -> None:
    meta = {"config": asdict(model.config), "seed": model.config.seed,
            "vocab": model.vocab.itos[2:],
            "epoch_losses": list(model.epoch_losses)}
    save_container(path, "text_embedder", meta, model.state_tensors())


def load_embedder(path) -> TextEmbedder:
    _, meta, tensors = load_container(path, expect_kind="text_embedder")
    config = EmbedderConfig(**meta["config"])
    vocab = WordVocab(meta["vocab"])
    net = _PooledTextNet(len(vocab), config.dim)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return TextEmbedder(vocab, net, config, tuple(meta.get("epoch_losses", ())))


def save_classifier(path, model: PairClassifier) -> None:
    meta = {"config": asdict(model.config), "seed": model.config.seed,
            "vocab": model.vocab.itos[2:],
            "epoch_losses": list(model.epoch_losses),
            "train_accuracy": model.train_accuracy}
    save_container(path, "pair_classifier", meta, model.state_tensors())


def load_classifier(path) -> PairClassifier:
    _, meta, tensors = load_container(path, expect_kind="pair_classifier")
    config = ClassifierConfig(**meta["config"])
    vocab = WordVocab(meta["vocab"])
    net = _PairNet(len(vocab), config.dim, config.hidden)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return PairClassifier(vocab, net, config, tuple(meta.get("epoch_losses", ())),
                          meta.get("train_accuracy", 0.0))
