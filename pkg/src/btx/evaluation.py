"""Scoring and analysis: corpus BLEU, cross-entropy in bits per token,
word-level fluency analysis of subword-composed output, and learning-curve
extraction from training metrics logs.
"""

from __future__ import annotations

import csv
import math
import sys
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import model, subword
from .corpus import DataError


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4,
         case_sensitive: bool = True) -> BleuReport:
    """Corpus-level BLEU: modified n-gram precision with clipping, geometric
    mean over n=1..max_n, brevity penalty exp(1 - ref_len/hyp_len) when the
    hypothesis side is shorter.  No smoothing: any zero precision gives 0.

    Inputs are pre-tokenized lines (tokens separated by whitespace), one
    reference per hypothesis.
    """
    hypotheses = list(hypotheses)
    references = list(references)
    if len(hypotheses) != len(references):
        raise DataError(
            f"hypothesis/reference length mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise DataError("cannot score an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if not case_sensitive:
            hyp, ref = hyp.lower(), ref.lower()
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hg = _ngrams(h, n)
            rg = _ngrams(r, n)
            totals[n - 1] += sum(hg.values())
            matches[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0 if ref_len > 0 else 1.0
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(bleu=score, precisions=precisions, brevity_penalty=bp,
                      hyp_len=hyp_len, ref_len=ref_len)


# ---------------------------------------------------------------------------
# Cross-entropy


LN2 = math.log(2.0)


def corpus_cross_entropy(bundle: model.ModelBundle, pairs) -> float:
    """Mean negative log2 probability per target token, teacher-forced, with
    training-time regularizers disabled.

    `pairs` are (source tokens, target tokens) sequences; encoding and the
    trailing <eos> are applied here.
    """
    from .corpus import encode_sentence

    encoded = [
        (encode_sentence(bundle.src_vocab, s), encode_sentence(bundle.tgt_vocab, t))
        for s, t in pairs
    ]
    nats, tokens = model.corpus_nll(bundle.params, encoded)
    if tokens == 0:
        raise DataError("no target tokens to score")
    return nats / tokens / LN2


# ---------------------------------------------------------------------------
# Subword fluency analysis


@dataclass
class FluencyReport:
    produced: int
    attested: float
    sample: list[str] = field(default_factory=list)
    produced_words: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"produced": self.produced, "attested": self.attested,
                "sample": self.sample}


def fluency_analysis(output_lines, parallel_vocab, mono_corpus, reference_lines,
                     rng: np.random.Generator, sample_n: int = 100,
                     marker: str = subword.DEFAULT_MARKER) -> FluencyReport:
    """Count novel words assembled from two or more subword units.

    `output_lines` must still carry the boundary markers.  A word counts as
    produced when its desegmented form does not occur in the parallel
    training vocabulary; the attested fraction is how many of those occur in
    the monolingual corpus or the reference.  Counting is over word types,
    case-sensitive.  A blinded random sample of unattested words is returned
    for manual annotation.
    """
    parallel_vocab = set(parallel_vocab)
    attested_in = set()
    for line in mono_corpus:
        attested_in.update(line.split() if isinstance(line, str) else line)
    for line in reference_lines:
        attested_in.update(line.split() if isinstance(line, str) else line)

    produced_types: set[str] = set()
    for i, line in enumerate(output_lines):
        units = line.split() if isinstance(line, str) else list(line)
        if units and units[-1].endswith(marker):
            raise subword.SegmentationError(
                f"output line {i} ends with a continuation marker")
        word_units: list[str] = []
        for u in units:
            word_units.append(u)
            if not u.endswith(marker):
                word = subword.desegment_tokens(word_units, marker)[0]
                if len(word_units) >= 2 and word not in parallel_vocab:
                    produced_types.add(word)
                word_units = []

    produced_list = sorted(produced_types)
    attested_words = [w for w in produced_list if w in attested_in]
    unattested = [w for w in produced_list if w not in attested_in]
    attested_frac = len(attested_words) / len(produced_list) if produced_list else 0.0
    k = min(sample_n, len(unattested))
    sample = [unattested[i] for i in rng.permutation(len(unattested))[:k]] if k else []
    return FluencyReport(produced=len(produced_list), attested=attested_frac,
                         sample=sample, produced_words=produced_list)


# ---------------------------------------------------------------------------
# Learning curves


CURVE_FIELDS = ("run", "instances", "train_ce_bits", "dev_ce_bits")


def emit_curves(metrics_logs, out_csv, plot_dir=None) -> str:
    """Merge training metrics logs into curve data.

    `metrics_logs` is a list of (run_id, path).  The output CSV has columns
    (run, instances, train_ce_bits, dev_ce_bits); per-run whitespace-column
    .dat files suitable for plotting are written next to it (or into
    plot_dir).  Malformed rows are skipped with a warning on stderr.
    """
    import os

    rows_by_run: dict[str, list[tuple[int, float, float]]] = {}
    for run_id, path in metrics_logs:
        rows_by_run.setdefault(run_id, [])
        with open(path, encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for lineno, row in enumerate(reader, start=2):
                try:
                    instances = int(row["instances"])
                    train_ce = float(row["train_ce_bits"])
                    dev_ce = float(row["dev_ce_bits"]) if row.get("dev_ce_bits") else float("nan")
                except (KeyError, TypeError, ValueError):
                    print(f"emit-curves: skipping malformed row {path}:{lineno}",
                          file=sys.stderr)
                    continue
                rows_by_run[run_id].append((instances, train_ce, dev_ce))
    with open(out_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(CURVE_FIELDS) + "\n")
        for run_id in sorted(rows_by_run):
            for instances, train_ce, dev_ce in rows_by_run[run_id]:
                f.write(f"{run_id},{instances},{train_ce:.6f},{dev_ce:.6f}\n")
    plot_dir = plot_dir or os.path.dirname(out_csv) or "."
    for run_id, rows in rows_by_run.items():
        with open(os.path.join(plot_dir, f"{run_id}.dat"), "w",
                  encoding="utf-8", newline="\n") as f:
            f.write("# instances train_ce_bits dev_ce_bits\n")
            for instances, train_ce, dev_ce in rows:
                f.write(f"{instances} {train_ce:.6f} {dev_ce:.6f}\n")
    return out_csv
