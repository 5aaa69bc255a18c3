"""Synthetic language pair for desk-scale experiments.

The target language draws words from a small lexicon and generates
sentences from a seeded bigram chain, so monolingual text carries real
distributional signal.  The source sentence is the target sentence with the
word order reversed and every word substituted through a bijective lexicon.
A translator therefore has to learn both the word mapping and the
position-reversing alignment.

Domain splits carve the lexicon into disjoint halves, giving two
sub-languages that share an alphabet (and therefore subword units) but no
whole words.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


@dataclass
class ToySpec:
    seed: int = 2024
    n_words: int = 50
    n_parallel: int = 1000
    n_mono: int = 10000
    n_dev: int = 200
    n_test: int = 200
    min_len: int = 4
    max_len: int = 10
    fanout: int = 10          # preferred successors per word in the chain
    favored_mass: float = 0.65
    train_noise: float = 0.08  # word-replacement rate on training targets
    word_lo: int = 0          # sub-lexicon slice for domain experiments
    word_hi: int | None = None


@dataclass
class ToyData:
    tgt_words: list[str]
    lexicon: dict[str, str]            # target word -> source word
    train: list[tuple[str, str]]       # (source line, target line)
    dev: list[tuple[str, str]]
    test: list[tuple[str, str]]
    mono: list[str] = field(default_factory=list)


def _make_words(rng: np.random.Generator, count: int) -> list[str]:
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    words: list[str] = []
    seen = set()
    while len(words) < count:
        k = int(rng.integers(2, 4))
        idx = rng.integers(0, len(syllables), size=k)
        w = "".join(syllables[i] for i in idx)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _transition_table(rng: np.random.Generator, n: int, fanout: int,
                      favored_mass: float):
    """Each word prefers `fanout` successors; the rest split the remainder."""
    table = np.full((n, n), (1.0 - favored_mass) / n)
    for i in range(n):
        favored = rng.permutation(n)[:fanout]
        weights = rng.random(fanout) + 0.2
        table[i, favored] += favored_mass * weights / weights.sum()
        table[i] /= table[i].sum()
    start = rng.random(n) + 0.5
    return table, start / start.sum()


def _sample_sentence(rng, words, table, start, min_len, max_len) -> list[str]:
    length = int(rng.integers(min_len, max_len + 1))
    idx = int(rng.choice(len(words), p=start))
    out = [idx]
    for _ in range(length - 1):
        idx = int(rng.choice(len(words), p=table[idx]))
        out.append(idx)
    return [words[i] for i in out]


def to_source(tgt_tokens: list[str], lexicon: dict[str, str]) -> list[str]:
    """Reverse the word order and substitute through the lexicon."""
    return [lexicon[w] for w in reversed(tgt_tokens)]


def generate(spec: ToySpec) -> ToyData:
    word_rng = nn.make_rng(spec.seed, "toy-words")
    all_tgt = _make_words(word_rng, spec.n_words)
    all_src = _make_words(word_rng, spec.n_words)
    hi = spec.word_hi if spec.word_hi is not None else spec.n_words
    tgt_words = all_tgt[spec.word_lo:hi]
    lexicon = {t: s for t, s in zip(all_tgt, all_src)}

    # the chain is built over the sub-lexicon so domains have their own flavor
    grammar_rng = nn.make_rng(spec.seed, "toy-grammar", spec.word_lo, hi)
    table, start = _transition_table(grammar_rng, len(tgt_words),
                                     spec.fanout, spec.favored_mass)

    def make_pairs(label: str, count: int, noise: float = 0.0) -> list[tuple[str, str]]:
        rng = nn.make_rng(spec.seed, "toy", label, spec.word_lo, hi)
        pairs = []
        for _ in range(count):
            tgt = _sample_sentence(rng, tgt_words, table, start,
                                   spec.min_len, spec.max_len)
            src = to_source(tgt, lexicon)
            if noise > 0:
                # target-side corruption makes the training pairs imperfect
                # translations, the regime where small-corpus models overfit;
                # dev/test/monolingual text stays clean
                tgt = [tgt_words[int(rng.integers(0, len(tgt_words)))]
                       if rng.random() < noise else w for w in tgt]
            pairs.append((" ".join(src), " ".join(tgt)))
        return pairs

    mono_rng = nn.make_rng(spec.seed, "toy", "mono", spec.word_lo, hi)
    mono = [" ".join(_sample_sentence(mono_rng, tgt_words, table, start,
                                      spec.min_len, spec.max_len))
            for _ in range(spec.n_mono)]
    return ToyData(
        tgt_words=tgt_words,
        lexicon=lexicon,
        train=make_pairs("train", spec.n_parallel, noise=spec.train_noise),
        dev=make_pairs("dev", spec.n_dev),
        test=make_pairs("test", spec.n_test),
        mono=mono,
    )


def split_domains(spec: ToySpec) -> tuple[ToySpec, ToySpec]:
    """Two specs over disjoint halves of the lexicon."""
    import dataclasses

    half = spec.n_words // 2
    a = dataclasses.replace(spec, word_lo=0, word_hi=half)
    b = dataclasses.replace(spec, word_lo=half, word_hi=spec.n_words)
    return a, b


def write_toy_files(data: ToyData, out_dir, prefix: str = "") -> dict[str, str]:
    """Write the corpus as plain text files; returns name -> path."""
    import os

    from .corpus import write_lines

    paths = {}
    for split, pairs in (("train", data.train), ("dev", data.dev), ("test", data.test)):
        for side, col in (("src", 0), ("tgt", 1)):
            name = f"{prefix}{split}.{side}"
            path = os.path.join(out_dir, name)
            write_lines(path, [p[col] for p in pairs])
            paths[name] = path
    mono_path = os.path.join(out_dir, f"{prefix}mono.txt")
    write_lines(mono_path, data.mono)
    paths[f"{prefix}mono.txt"] = mono_path
    return paths
