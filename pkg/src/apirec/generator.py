"""API sequence generation from expanded queries.

Queries arrive as three channels (annotation, linked post title, linked
post API set), each subtokenized and truncated to ``max_len``. Separate
transformer encoders map each channel to a pooled vector; the three
vectors concatenate into the feature vector a 6-layer transformer
decoder conditions on. Decoding searches the subtoken space with beam
search under the chain-probability objective: a hypothesis scores the
product of its per-step conditional probabilities (a sum in log space,
no length normalization unless configured).

API renderings subtokenize on dots and word boundaries with the dot as
its own subtoken (``Float.parseFloat`` → ``Float``, ``.``,
``parseFloat``), so generated chains rejoin losslessly.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container
from .corpus import ApiCall
from .errors import DataError, MalformedApiError, TrainingError
from .text import word_tokens
from .util import derive_seed

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
DOT = "."


def subtokenize(text: str, mode: str) -> list[str]:
    """Split a text into generation subtokens.

    ``query`` mode lowercases and splits on whitespace/punctuation.
    ``api`` mode splits API renderings on whitespace and dots, keeping
    identifiers whole and emitting each dot as its own subtoken.
    """
    if mode == "query":
        return word_tokens(text)
    if mode != "api":
        raise ValueError(f"unknown subtokenize mode {mode!r}")
    out: list[str] = []
    for piece in text.split():
        for i, segment in enumerate(piece.split(DOT)):
            if i:
                out.append(DOT)
            if segment:
                out.append(segment)
    return out


def detokenize_apis(subtokens) -> tuple[list[ApiCall], int]:
    """Rejoin subtokens around dots into API calls.

    Every ``X . y`` triple becomes one call. Leftover runs of subtokens
    that fit no triple are dropped; the second return value counts those
    malformed fragments.
    """
    tokens = list(subtokens)
    consumed = [False] * len(tokens)
    calls: list[ApiCall] = []
    for j, tok in enumerate(tokens):
        if tok != DOT:
            continue
        prev_ok = j > 0 and not consumed[j - 1] and tokens[j - 1] != DOT
        next_ok = j + 1 < len(tokens) and tokens[j + 1] != DOT
        if not (prev_ok and next_ok):
            continue
        try:
            call = ApiCall(tokens[j - 1], tokens[j + 1])
        except MalformedApiError:
            continue
        calls.append(call)
        consumed[j - 1] = consumed[j] = consumed[j + 1] = True
    fragments = 0
    in_run = False
    for used in consumed:
        if not used and not in_run:
            fragments += 1
        in_run = not used
    return calls, fragments


class SubtokenVocab:
    """Subtoken↔id map with reserved pad/start/end/unknown ids."""

    def __init__(self, tokens: list[str]):
        for reserved in RESERVED_TOKENS:
            if reserved in tokens:
                raise DataError(f"vocabulary must not contain reserved token {reserved!r}")
        self.itos = list(RESERVED_TOKENS) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, token_lists, min_freq: int = 1) -> "SubtokenVocab":
        freq: Counter[str] = Counter()
        for tokens in token_lists:
            freq.update(tokens)
        kept = sorted((t for t, c in freq.items() if c >= min_freq),
                      key=lambda t: (-freq[t], t))
        return cls(kept)

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def __len__(self) -> int:
        return len(self.itos)


@dataclass(frozen=True, slots=True)
class ExpandedQuery:
    """Three id-encoded input channels, each already truncated to max_len."""

    annotation_tokens: tuple[int, ...]
    title_tokens: tuple[int, ...]
    api_tokens: tuple[int, ...]
    max_len: int = 64

    def __post_init__(self):
        for name in ("annotation_tokens", "title_tokens", "api_tokens"):
            if len(getattr(self, name)) > self.max_len:
                raise DataError(f"channel {name} exceeds max_len={self.max_len}")

    def channels(self) -> tuple[tuple[int, ...], ...]:
        return (self.annotation_tokens, self.title_tokens, self.api_tokens)


def make_query(vocab: SubtokenVocab, annotation: str, title: str = "",
               apis=(), max_len: int = 64) -> ExpandedQuery:
    """Subtokenize, id-encode and head-truncate the three channels."""
    api_subtokens: list[str] = []
    for rendering in apis:
        api_subtokens.extend(subtokenize(rendering, "api"))
    return ExpandedQuery(
        tuple(vocab.encode(subtokenize(annotation, "query"))[:max_len]),
        tuple(vocab.encode(subtokenize(title, "query"))[:max_len]),
        tuple(vocab.encode(api_subtokens)[:max_len]),
        max_len,
    )


def encode_target(vocab: SubtokenVocab, renderings, max_len: int = 64) -> tuple[int, ...]:
    tokens: list[str] = []
    for rendering in renderings:
        tokens.extend(subtokenize(rendering, "api"))
    return tuple(vocab.encode(tokens)[:max_len])


@dataclass(frozen=True, slots=True)
class GenerationConfig:
    max_len: int = 64
    beam_size: int = 5
    max_decode_steps: int = 64
    epochs: int = 30
    seed: int = 0
    dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 6
    heads: int = 4
    feedforward: int = 256
    lr: float = 2e-3
    batch_size: int = 32
    share_encoders: bool = False
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_decode_steps < 1:
            raise ValueError(f"max_decode_steps must be >= 1, got {self.max_decode_steps}")


@dataclass(frozen=True, slots=True)
class BeamHypothesis:
    """A partial or finished decode: token ids and cumulative log-probability."""

    token_ids: tuple[int, ...]
    log_prob: float
    finished: bool


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _encoder_stack(config: GenerationConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        config.dim, config.heads, config.feedforward, dropout=0.0,
        batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, config.encoder_layers, enable_nested_tensor=False)


class _Seq2SeqNet(nn.Module):
    def __init__(self, vocab_size: int, config: GenerationConfig):
        super().__init__()
        self.config = config
        dim = config.dim
        self.tok_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(max(config.max_len, config.max_decode_steps) + 2, dim)
        n_encoders = 1 if config.share_encoders else 3
        self.encoders = nn.ModuleList(_encoder_stack(config) for _ in range(n_encoders))
        dec_layer = nn.TransformerDecoderLayer(
            dim, config.heads, config.feedforward, dropout=0.0,
            batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, config.decoder_layers)
        self.out = nn.Linear(dim, vocab_size)
        self.scale = math.sqrt(dim)

    def _encoder_for(self, channel: int) -> nn.TransformerEncoder:
        return self.encoders[0 if self.config.share_encoders else channel]

    def _embed_positions(self, ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        return self.tok_emb(ids) * self.scale + self.pos_emb(positions)[None]

    def encode_channel(self, channel: int, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Pooled vector per row; rows with no real tokens pool to zeros."""
        x = self._embed_positions(ids)
        pad_mask = mask < 0.5
        empty = mask.sum(1) < 0.5
        if bool(empty.any()):
            # leave one key unmasked so attention stays finite, then zero the pool
            pad_mask = pad_mask.clone()
            pad_mask[empty, 0] = False
        hidden = self._encoder_for(channel)(x, src_key_padding_mask=pad_mask)
        summed = (hidden * mask.unsqueeze(-1)).sum(1)
        return summed / mask.sum(1).clamp(min=1.0).unsqueeze(-1)

    def memory(self, channel_batches) -> torch.Tensor:
        """Stack the three pooled channel vectors into (B, 3, dim)."""
        pooled = [self.encode_channel(c, ids, mask)
                  for c, (ids, mask) in enumerate(channel_batches)]
        return torch.stack(pooled, dim=1)

    def logits(self, memory: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        x = self._embed_positions(tgt_in)
        size = tgt_in.shape[1]
        causal = torch.triu(torch.ones(size, size, dtype=torch.bool,
                                       device=tgt_in.device), diagonal=1)
        hidden = self.decoder(x, memory, tgt_mask=causal)
        return self.out(hidden)


def _pad_channel(id_lists) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(1, max(len(ids) for ids in id_lists))
    ids = torch.full((len(id_lists), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(id_lists), width), dtype=torch.float32)
    for row, seq in enumerate(id_lists):
        if seq:
            ids[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[row, :len(seq)] = 1.0
    return ids, mask


def _query_batch(queries) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [_pad_channel([q.channels()[c] for q in queries]) for c in range(3)]


class Seq2SeqModel:
    """Trained generator; immutable and safe for concurrent decoding."""

    def __init__(self, vocab: SubtokenVocab, net: _Seq2SeqNet, config: GenerationConfig,
                 epoch_losses: tuple[float, ...] = ()):
        self.vocab = vocab
        self.net = net.eval()
        self.config = config
        self.epoch_losses = epoch_losses

    def _check_channels(self, q: ExpandedQuery) -> None:
        for name, channel in zip(("annotation", "title", "api"), q.channels()):
            if len(channel) > self.config.max_len:
                raise DataError(
                    f"channel overflow: {name} has {len(channel)} subtokens, "
                    f"model max_len is {self.config.max_len}")

    def encode(self, q: ExpandedQuery) -> np.ndarray:
        """The feature vector: annotation, title and API encodings concatenated."""
        self._check_channels(q)
        with torch.no_grad():
            memory = self.net.memory(_query_batch([q]))
        return memory[0].reshape(-1).numpy().astype(np.float32, copy=True)

    def stepper(self, q: ExpandedQuery):
        """Per-query decoding closure; encodes the channels exactly once."""
        self._check_channels(q)
        with torch.no_grad():
            memory = self.net.memory(_query_batch([q]))

        def step(prefix_ids) -> np.ndarray:
            prefix_ids = list(prefix_ids)
            if len(prefix_ids) > self.config.max_decode_steps:
                raise ValueError(
                    f"prefix of {len(prefix_ids)} exceeds max_decode_steps="
                    f"{self.config.max_decode_steps}")
            tgt = torch.tensor([[BOS_ID, *prefix_ids]], dtype=torch.long)
            with torch.no_grad():
                logits = self.net.logits(memory, tgt)
            dist = torch.softmax(logits[0, -1], dim=-1)
            return dist.numpy().astype(np.float64)

        return step

    def step_distribution(self, q: ExpandedQuery, prefix_ids) -> np.ndarray:
        return self.stepper(q)(prefix_ids)


def encode(model, q: ExpandedQuery) -> np.ndarray:
    return model.encode(q)


def step_distribution(model, q, prefix_ids) -> np.ndarray:
    """Next-token distribution given a query and previously generated ids."""
    return np.asarray(model.step_distribution(q, prefix_ids), dtype=np.float64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_generator(dataset, vocab: SubtokenVocab, config: GenerationConfig,
                    checkpoint_dir=None) -> Seq2SeqModel:
    """Teacher-forced cross-entropy training of the generator.

    ``dataset`` is a sequence of (ExpandedQuery, target id sequence).
    With a checkpoint directory, the model is persisted after every
    epoch. ``epochs=0`` returns the freshly initialized model.
    """
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("empty dataset: nothing to train the generator on")
    for idx, (query, target) in enumerate(dataset):
        target = tuple(target)
        if not target or all(t == PAD_ID for t in target):
            raise DataError(f"record {idx}: target sequence is empty or all padding")
        if len(target) > config.max_len:
            raise DataError(f"record {idx}: target exceeds max_len={config.max_len}")

    torch.manual_seed(derive_seed(config.seed, "generator-init"))
    net = _Seq2SeqNet(len(vocab), config)
    model = Seq2SeqModel(vocab, net, config)
    if config.epochs == 0:
        return model

    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss(ignore_index=PAD_ID)
    order = list(range(len(dataset)))
    losses: list[float] = []
    net.train()
    for epoch in range(config.epochs):
        random.Random(derive_seed(config.seed, "generator-order", epoch)).shuffle(order)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [dataset[i] for i in order[start:start + config.batch_size]]
            memory = net.memory(_query_batch([q for q, _ in chunk]))
            targets = [tuple(t) for _, t in chunk]
            width = max(len(t) for t in targets) + 1
            tgt_in = torch.full((len(chunk), width), PAD_ID, dtype=torch.long)
            tgt_out = torch.full((len(chunk), width), PAD_ID, dtype=torch.long)
            for row, t in enumerate(targets):
                tgt_in[row, 0] = BOS_ID
                tgt_in[row, 1:len(t) + 1] = torch.tensor(t, dtype=torch.long)
                tgt_out[row, :len(t)] = torch.tensor(t, dtype=torch.long)
                tgt_out[row, len(t)] = EOS_ID
            logits = net.logits(memory, tgt_in)
            loss = loss_fn(logits.reshape(-1, len(vocab)), tgt_out.reshape(-1))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite generator loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        losses.append(total / len(dataset))
        model = Seq2SeqModel(vocab, net, config, tuple(losses))
        if checkpoint_dir is not None:
            net.eval()
            save_generator(Path(checkpoint_dir) / f"generator-epoch{epoch + 1:03d}.bin", model)
            net.train()
    net.eval()
    return model


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _get_stepper(model, q):
    if hasattr(model, "stepper"):
        return model.stepper(q)
    return lambda prefix: np.asarray(model.step_distribution(q, prefix), dtype=np.float64)


def _to_subtokens(model, token_ids) -> list[str]:
    ids = list(token_ids)
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return [model.vocab.itos[i] for i in ids]


def greedy_decode_scored(model, q, config: GenerationConfig | None = None) -> tuple[list[str], float]:
    """Argmax decoding; returns the subtokens and their chain log-probability."""
    config = config or model.config
    step = _get_stepper(model, q)
    prefix: list[int] = []
    log_prob = 0.0
    for _ in range(config.max_decode_steps):
        dist = step(prefix)
        token = int(np.argmax(dist))
        log_prob += math.log(dist[token])
        if token == EOS_ID:
            break
        prefix.append(token)
    return _to_subtokens(model, prefix), log_prob


def greedy_decode(model, q, config: GenerationConfig | None = None) -> list[str]:
    """Argmax token per step until the end token or the step limit."""
    return greedy_decode_scored(model, q, config)[0]


def beam_search(model, q, beam_size: int | None = None,
                config: GenerationConfig | None = None) -> list[tuple[list[str], float]]:
    """Beam search under the chain-probability objective.

    Keeps the ``beam_size`` best unfinished hypotheses per step; finished
    hypotheses retire to a pool returned sorted by log-probability
    (ties by token-id order). Hypotheses still unfinished at the step
    limit join the pool as they are.
    """
    config = config or model.config
    beam_size = beam_size if beam_size is not None else config.beam_size
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    step = _get_stepper(model, q)

    beams = [BeamHypothesis((), 0.0, False)]
    pool: list[BeamHypothesis] = []
    for _ in range(config.max_decode_steps):
        if not beams:
            break
        candidates: list[BeamHypothesis] = []
        for hyp in beams:
            dist = step(hyp.token_ids)
            top = sorted(range(len(dist)), key=lambda t: (-dist[t], t))[:beam_size]
            for token in top:
                if dist[token] <= 0.0:
                    continue
                candidates.append(BeamHypothesis(
                    hyp.token_ids + (token,),
                    hyp.log_prob + math.log(dist[token]),
                    token == EOS_ID,
                ))
        candidates.sort(key=lambda h: (-h.log_prob, h.token_ids))
        beams = []
        for cand in candidates:
            if cand.finished:
                pool.append(cand)
            elif len(beams) < beam_size:
                beams.append(cand)
    pool.extend(beams)

    def rank_key(hyp: BeamHypothesis):
        score = hyp.log_prob
        if config.length_normalize and hyp.token_ids:
            score /= len(hyp.token_ids)
        return (-score, hyp.token_ids)

    pool.sort(key=rank_key)
    results = []
    for hyp in pool:
        score = hyp.log_prob
        if config.length_normalize and hyp.token_ids:
            score /= len(hyp.token_ids)
        results.append((_to_subtokens(model, hyp.token_ids), score))
    return results


def predict_calls(model, q, beam_size: int | None = None,
                  config: GenerationConfig | None = None,
                  greedy: bool = False) -> tuple[list[ApiCall], float, int]:
    """Decode a query into API calls; returns (calls, log_prob, malformed count)."""
    if greedy:
        subtokens, log_prob = greedy_decode_scored(model, q, config)
    else:
        ranked = beam_search(model, q, beam_size, config)
        subtokens, log_prob = ranked[0] if ranked else ([], float("-inf"))
    calls, malformed = detokenize_apis(subtokens)
    return calls, log_prob, malformed


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_generator(path, model: Seq2SeqModel) -> None:
    meta = {"config": asdict(model.config), "seed": model.config.seed,
            "vocab": model.vocab.itos[len(RESERVED_TOKENS):],
            "epoch_losses": list(model.epoch_losses)}
    tensors = {k: v.detach().numpy().copy() for k, v in model.net.state_dict().items()}
    save_container(path, "seq2seq_generator", meta, tensors)


def load_generator(path) -> Seq2SeqModel:
    _, meta, tensors = load_container(path, expect_kind="seq2seq_generator")
    config = GenerationConfig(**meta["config"])
    vocab = SubtokenVocab(meta["vocab"])
    net = _Seq2SeqNet(len(vocab), config)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return Seq2SeqModel(vocab, net, config, tuple(meta.get("epoch_losses", ())))
