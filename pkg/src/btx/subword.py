"""Subword segmentation: learned byte-pair merges plus a character-bigram
fallback, both losslessly reversible.

Units that continue a word carry a suffix marker (default "@@"); the final
unit of a word is unmarked.  Learning appends an end-of-word sentinel to
every word so merges can distinguish word-final symbols.

Model file format: a header line "#version 1 marker=<marker>", then one
merge per line as "left right".
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

DEFAULT_MARKER = "@@"
WORD_END = "</w>"


class SegmentationError(ValueError):
    pass


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    marker: str = DEFAULT_MARKER
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge pair in model")


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def bpe_learn(word_freqs: dict[str, int], num_merges: int,
              marker: str = DEFAULT_MARKER) -> BpeModel:
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    Words start as character sequences with an end-of-word sentinel; pair
    frequencies are weighted by word counts.  Ties go to the
    lexicographically smallest (left, right) pair, and learning stops early
    once no pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    if not word_freqs:
        raise ValueError("word_freqs must be non-empty")
    words = {tuple(w) + (WORD_END,): int(c) for w, c in word_freqs.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(words)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in counts.items() if c == best_count)
        merges.append(best)
        words = {_merge_word(sym, best): freq for sym, freq in words.items()}
    return BpeModel(merges=merges, marker=marker)


def bpe_apply(model: BpeModel, word: str) -> list[str]:
    """Segment one word by replaying the learned merges in order."""
    if not word:
        raise ValueError("cannot segment an empty word")
    cached = model._cache.get(word)
    if cached is not None:
        return list(cached)
    symbols = tuple(word) + (WORD_END,)
    for pair in model.merges:
        if len(symbols) == 1:
            break
        symbols = _merge_word(symbols, pair)
    units = []
    for sym in symbols:
        if sym == WORD_END:
            continue
        if sym.endswith(WORD_END):
            sym = sym[: -len(WORD_END)]
        units.append(sym)
    marked = [u + model.marker for u in units[:-1]] + [units[-1]]
    model._cache[word] = tuple(marked)
    return marked


def bpe_decode(units: list[str], marker: str = DEFAULT_MARKER) -> str:
    """Inverse of segmentation: strip markers and concatenate.

    Raises when the final unit still carries the continuation marker.
    """
    if not units:
        raise SegmentationError("cannot decode an empty unit list")
    for u in units[:-1]:
        if not u.endswith(marker):
            raise SegmentationError(f"non-final unit {u!r} lacks the marker")
    if units[-1].endswith(marker):
        raise SegmentationError(f"final unit {units[-1]!r} carries the marker")
    return "".join(u[: -len(marker)] for u in units[:-1]) + units[-1]


def char_bigram_segment(word: str, keep, marker: str = DEFAULT_MARKER) -> list[str]:
    """Keep frequent words whole; split the rest into character bigrams
    (the last unit may be a single character)."""
    if word in keep:
        return [word]
    units = [word[i:i + 2] for i in range(0, len(word), 2)]
    return [u + marker for u in units[:-1]] + [units[-1]]


def top_k_words(word_freqs: dict[str, int], k: int) -> set[str]:
    """The k most frequent words, ties broken by the word itself."""
    ranked = sorted(word_freqs, key=lambda w: (-word_freqs[w], w))
    return set(ranked[:k])


# ---------------------------------------------------------------------------
# Line-level helpers


def segment_tokens(model: BpeModel, tokens) -> list[str]:
    out: list[str] = []
    for tok in tokens:
        out.extend(bpe_apply(model, tok))
    return out


def desegment_tokens(units, marker: str = DEFAULT_MARKER,
                     strict: bool = False) -> list[str]:
    """Reassemble words from a unit stream.

    In strict mode a trailing marked unit raises; otherwise the dangling
    marker is dropped (decoder output can be malformed).
    """
    words: list[str] = []
    current: list[str] = []
    for u in units:
        if u.endswith(marker):
            current.append(u[: -len(marker)])
        else:
            current.append(u)
            words.append("".join(current))
            current = []
    if current:
        if strict:
            raise SegmentationError("line ends with a continuation marker")
        words.append("".join(current))
    return words


def word_counts(lines) -> Counter:
    counts: Counter = Counter()
    for line in lines:
        toks = line.split() if isinstance(line, str) else line
        counts.update(toks)
    return counts


def unit_inventory(model: BpeModel, alphabet) -> set[str]:
    """Every unit string the model can emit over the given alphabet, in both
    marked and final form.  Useful for building vocabularies that keep full
    character-level coverage."""
    symbols = set(alphabet) | {WORD_END}
    for left, right in model.merges:
        symbols.add(left + right)
    units = set()
    for sym in symbols:
        if sym == WORD_END:
            continue
        base = sym[: -len(WORD_END)] if sym.endswith(WORD_END) else sym
        if base:
            units.add(base)
            units.add(base + model.marker)
    return units


# ---------------------------------------------------------------------------
# Model file I/O


def save_bpe(model: BpeModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#version 1 marker={model.marker}\n")
        for left, right in model.merges:
            f.write(f"{left} {right}\n")


def load_bpe(path) -> BpeModel:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith("#version 1 marker="):
            raise ValueError(f"{path}: not a subword model file")
        marker = header.split("marker=", 1)[1]
        merges = []
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            left, right = line.split(" ")
            merges.append((left, right))
    return BpeModel(merges=merges, marker=marker)
