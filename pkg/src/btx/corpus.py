"""Corpus ingestion, filtering, vocabulary construction, mixing with
monolingual data, and minibatch assembly.

Corpora are UTF-8 plain text, one sentence per line.  Parallel corpora are
two aligned files with the same line count.  A vocabulary serializes as one
token per line, line number = id.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nn

NULL = "<null>"
EOS = "<eos>"
UNK = "<unk>"
RESERVED = (NULL, EOS, UNK)
NULL_ID, EOS_ID, UNK_ID = 0, 1, 2

ORIGIN_PARALLEL = "parallel"
ORIGIN_MONO = "mono-dummy"
ORIGIN_SYNTHETIC = "synthetic"
ORIGINS = (ORIGIN_PARALLEL, ORIGIN_MONO, ORIGIN_SYNTHETIC)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(line: str) -> list[str]:
    """Whitespace tokenization with punctuation detached as single tokens.

    Deliberately minimal; corpora are consumed as given (no truecasing,
    no language-specific rules).
    """
    return _TOKEN_RE.findall(line)


@dataclass(frozen=True)
class SentencePair:
    source: tuple[str, ...]
    target: tuple[str, ...]
    origin: str = ORIGIN_PARALLEL

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == ORIGIN_MONO and self.source != (NULL,):
            raise ValueError("dummy-source pairs must have exactly <null> as source")


def mono_pair(target) -> SentencePair:
    """Wrap a monolingual target sentence with the single-token dummy source."""
    return SentencePair(source=(NULL,), target=tuple(target), origin=ORIGIN_MONO)


def filter_pairs(pairs, max_ratio: float) -> list[SentencePair]:
    """Drop pairs with an empty side or a length ratio above max_ratio.

    Ratio is max(|src|, |tgt|) / min(|src|, |tgt|) over token counts; a ratio
    exactly equal to max_ratio is kept.  Order is preserved and the filter is
    idempotent.
    """
    if max_ratio <= 0:
        raise ValueError("max_ratio must be positive")
    kept = []
    for pair in pairs:
        ls, lt = len(pair.source), len(pair.target)
        if ls == 0 or lt == 0:
            continue
        if max(ls, lt) / min(ls, lt) > max_ratio:
            continue
        kept.append(pair)
    return kept


class Vocabulary:
    """Dense token<->id map with <null>, <eos>, <unk> reserved up front.

    The size never changes after construction; unknown tokens encode to
    <unk>.
    """

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved symbols")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return cls(tokens)


def build_vocabulary(corpus, max_size: int) -> Vocabulary:
    """Keep the most frequent tokens, ties broken by first occurrence.

    `corpus` is an iterable of token sequences.  Reserved symbols are always
    included and count against max_size.
    """
    if max_size < 3:
        raise ValueError("max_size must leave room for the reserved symbols")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    pos = 0
    empty = True
    for sent in corpus:
        empty = False
        for tok in sent:
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = pos
                pos += 1
    if empty:
        raise DataError("cannot build a vocabulary from an empty corpus")
    candidates = [t for t in counts if t not in RESERVED]
    candidates.sort(key=lambda t: (-counts[t], first_seen[t]))
    kept = candidates[: max_size - len(RESERVED)]
    return Vocabulary(list(RESERVED) + kept)


def encode_sentence(vocab: Vocabulary, tokens) -> list[int]:
    """Map tokens to ids and append <eos>; unknown tokens become <unk>."""
    return [vocab.lookup(t) for t in tokens] + [EOS_ID]


# ---------------------------------------------------------------------------
# Dataset mixing


@dataclass
class MixedDataset:
    """Parallel pool plus optional monolingual and synthetic pools.

    One epoch is one pass over `parallel`, plus round(ratio * |parallel|)
    monolingual sentences freshly resampled per epoch (uniform with
    replacement), plus up to `synthetic_cap` synthetic pairs resampled per
    epoch without replacement (all of them when no cap is set and the
    synthetic pool was not already merged into `parallel`).
    """

    parallel: list[SentencePair]
    mono_pool: list = field(default_factory=list)
    ratio: float = 0.0
    seed: int = 0
    synthetic_pool: list = field(default_factory=list)
    synthetic_cap: int | None = None

    def __post_init__(self):
        if self.ratio < 0:
            raise ValueError("ratio must be >= 0")


def epoch_stream(ds: MixedDataset, epoch_index: int) -> list[SentencePair]:
    """Deterministic shuffled stream for one epoch, seeded by (seed, epoch)."""
    out = list(ds.parallel)
    n_mono = int(round(ds.ratio * len(ds.parallel)))
    if n_mono > 0:
        if not ds.mono_pool:
            raise DataError("ratio > 0 but the monolingual pool is empty")
        rng = nn.make_rng(ds.seed, "mono", epoch_index)
        picks = rng.integers(0, len(ds.mono_pool), size=n_mono)
        out.extend(mono_pair(ds.mono_pool[i]) for i in picks)
    if ds.synthetic_pool:
        rng = nn.make_rng(ds.seed, "synthetic", epoch_index)
        cap = len(ds.synthetic_pool) if ds.synthetic_cap is None \
            else min(ds.synthetic_cap, len(ds.synthetic_pool))
        picks = rng.permutation(len(ds.synthetic_pool))[:cap]
        out.extend(ds.synthetic_pool[i] for i in picks)
    shuffle_rng = nn.make_rng(ds.seed, "shuffle", epoch_index)
    order = shuffle_rng.permutation(len(out))
    return [out[i] for i in order]


@dataclass
class Minibatch:
    """A group of examples trained in one update.

    Dummy-source examples are never mixed with other origins so encoder
    freezing can be applied per minibatch.  Padding masks are derived when
    the batch is encoded (pad_encode).
    """

    examples: list[SentencePair]

    @property
    def origin(self) -> str:
        if all(e.origin == ORIGIN_MONO for e in self.examples):
            return ORIGIN_MONO
        return self.examples[0].origin

    def __len__(self) -> int:
        return len(self.examples)


def make_minibatches(stream, batch_size: int, sort_window: int) -> list[Minibatch]:
    """Window the stream, sort each window by target length, split into
    batches, segregating dummy-source examples into their own batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if sort_window < 1:
        raise ValueError("sort_window must be >= 1")
    stream = list(stream)
    window_size = batch_size * sort_window
    batches: list[Minibatch] = []
    for start in range(0, len(stream), window_size):
        window = sorted(stream[start:start + window_size], key=lambda e: len(e.target))
        mono = [e for e in window if e.origin == ORIGIN_MONO]
        rest = [e for e in window if e.origin != ORIGIN_MONO]
        for part in (rest, mono):
            for i in range(0, len(part), batch_size):
                chunk = part[i:i + batch_size]
                if chunk:
                    batches.append(Minibatch(chunk))
    return batches


def pad_encode(minibatch: Minibatch, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    """Encode and pad a minibatch: (src_ids, src_mask, tgt_ids, tgt_mask)."""
    from .model import pad_ids

    src = [encode_sentence(src_vocab, e.source) for e in minibatch.examples]
    tgt = [encode_sentence(tgt_vocab, e.target) for e in minibatch.examples]
    src_ids, src_mask = pad_ids(src, pad_value=EOS_ID)
    tgt_ids, tgt_mask = pad_ids(tgt, pad_value=EOS_ID)
    return src_ids, src_mask, tgt_ids, tgt_mask


# ---------------------------------------------------------------------------
# File I/O


def read_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f]
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e


def write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def load_parallel(src_path, tgt_path, origin: str = ORIGIN_PARALLEL,
                  pre_tokenized: bool = True) -> list[SentencePair]:
    """Read two aligned files into pairs; raises on a line-count mismatch."""
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"parallel corpus line counts differ: {src_path} has "
            f"{len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    split = (lambda s: tuple(s.split())) if pre_tokenized else (lambda s: tuple(tokenize(s)))
    return [SentencePair(split(s), split(t), origin) for s, t in zip(src_lines, tgt_lines)]
