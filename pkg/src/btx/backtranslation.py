"""Synthetic parallel data: sample monolingual target text, translate it
into the source language with a single reverse model, and pair the machine
output with the untouched original lines.

Only the source side of the resulting corpus is synthetic; the target side
is always byte-identical to the monolingual input.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field

from . import corpus, decoding, model, nn, subword
from .corpus import DataError


@dataclass
class SyntheticCorpus:
    source_lines: list[str]
    target_lines: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.source_lines) != len(self.target_lines):
            raise DataError("synthetic corpus sides must be line-aligned")

    def pairs(self, bpe_model: subword.BpeModel | None = None,
              max_ratio: float | None = 9.0) -> list[corpus.SentencePair]:
        """Tokenize (and segment) into training pairs with origin=synthetic.

        Degenerate back-translations can produce wild length ratios, so the
        pairs are re-filtered by default; pass max_ratio=None to keep all.
        """
        out = []
        for s, t in zip(self.source_lines, self.target_lines):
            st = corpus.tokenize(s)
            tt = corpus.tokenize(t)
            if bpe_model is not None:
                st = subword.segment_tokens(bpe_model, st)
                tt = subword.segment_tokens(bpe_model, tt)
            out.append(corpus.SentencePair(tuple(st), tuple(tt),
                                           corpus.ORIGIN_SYNTHETIC))
        if max_ratio is not None:
            out = corpus.filter_pairs(out, max_ratio)
        return out


def sample_monolingual(corpus_path, n: int, seed: int) -> list[str]:
    """Uniform sample of n lines without replacement, one streaming pass
    (reservoir).  Asking for more lines than the file has returns the whole
    file in original order, with a warning."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    rng = nn.make_rng(seed, "mono-sample")
    reservoir: list[str] = []
    try:
        with open(corpus_path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.rstrip("\n")
                if i < n:
                    reservoir.append(line)
                else:
                    j = int(rng.integers(0, i + 1))
                    if j < n:
                        reservoir[j] = line
    except OSError as e:
        raise DataError(f"cannot read monolingual corpus {corpus_path}: {e}") from e
    if len(reservoir) < n:
        print(f"warning: asked for {n} lines but {corpus_path} has only "
              f"{len(reservoir)}; using the whole corpus", file=sys.stderr)
    return reservoir


def _model_id(bundle: model.ModelBundle) -> str:
    return nn.param_fingerprint(bundle.params.parameters())[:16]


def _mode_name(mode) -> str:
    return mode if isinstance(mode, str) else f"beam{mode[1]}"


def back_translate(reverse_model: model.ModelBundle, mono_lines: list[str],
                   mode, bpe_model: subword.BpeModel | None = None,
                   seed: int = 0) -> SyntheticCorpus:
    """Translate monolingual target text into the source language.

    Exactly one reverse model is used (never an ensemble).  Decode failures
    leave an empty source line and are logged on stderr.
    """
    source_lines, failures = decoding.translate_corpus(
        [reverse_model], mono_lines, mode, bpe_model=bpe_model)
    for idx, message in failures:
        print(f"back-translation failed on line {idx}: {message}", file=sys.stderr)
    provenance = {
        "reverse_model_id": _model_id(reverse_model),
        "decode_mode": _mode_name(mode),
        "seed": seed,
        "sample_size": len(mono_lines),
        "failures": len(failures),
    }
    return SyntheticCorpus(source_lines=source_lines,
                           target_lines=list(mono_lines),
                           provenance=provenance)


def self_synthesize(parallel_pairs: list[corpus.SentencePair],
                    reverse_model: model.ModelBundle, mode,
                    bpe_model: subword.BpeModel | None = None,
                    marker: str = subword.DEFAULT_MARKER) -> SyntheticCorpus:
    """Back-translate the target side of an existing parallel corpus,
    discarding its original source side.  Mixing the result 1-1 with the
    original corpus isolates the regularization effect of synthetic data."""
    target_lines = [" ".join(subword.desegment_tokens(list(p.target), marker))
                    for p in parallel_pairs]
    synth = back_translate(reverse_model, target_lines, mode, bpe_model=bpe_model)
    synth.provenance["self_synthesized"] = True
    return synth


def corpus_digest(lines: list[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
