"""Command-line entry point.

Subcommands: bpe-learn, bpe-apply, bigram-apply, train, fine-tune,
translate, backtranslate, score-bleu, score-ce, analyze-fluency,
emit-curves, run-profile, validate-config.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import (backtranslation, corpus, decoding, evaluation, model, nn,
               profiles, subword, training, toy)
from .corpus import DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_STAGE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_train_config(args) -> training.TrainConfig:
    cfg = training.load_config(args.config) if args.config else training.TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.check()


def _read_pairs(src, tgt, origin=corpus.ORIGIN_PARALLEL):
    return corpus.load_parallel(src, tgt, origin=origin)


def _mode(args):
    return "greedy" if args.beam is None else ("beam", args.beam)


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_bpe_learn(args):
    lines = []
    for path in args.input:
        lines.extend(corpus.read_lines(path))
    if not lines:
        raise DataError("no input text for subword learning")
    model_ = subword.bpe_learn(subword.word_counts(lines), args.merges,
                               marker=args.marker)
    subword.save_bpe(model_, args.output)
    print(f"learned {len(model_.merges)} merges -> {args.output}")


def cmd_bpe_apply(args):
    bpe = subword.load_bpe(args.model)
    lines = corpus.read_lines(args.input)
    out = [" ".join(subword.segment_tokens(bpe, line.split())) for line in lines]
    corpus.write_lines(args.output, out)


def cmd_bigram_apply(args):
    lines = corpus.read_lines(args.input)
    freq_lines = corpus.read_lines(args.freq_from) if args.freq_from else lines
    keep = subword.top_k_words(subword.word_counts(freq_lines), args.keep_top)
    out = []
    for line in lines:
        units = []
        for word in line.split():
            units.extend(subword.char_bigram_segment(word, keep, marker=args.marker))
        out.append(" ".join(units))
    corpus.write_lines(args.output, out)


def cmd_train(args):
    cfg = _load_train_config(args)
    parallel = corpus.filter_pairs(_read_pairs(args.src, args.tgt), args.max_ratio)
    mono = None
    if args.mono:
        mono = [tuple(line.split()) for line in corpus.read_lines(args.mono)]
    synthetic = None
    if args.synthetic_src:
        if not args.synthetic_tgt:
            raise DataError("--synthetic-src requires --synthetic-tgt")
        synthetic = corpus.filter_pairs(
            _read_pairs(args.synthetic_src, args.synthetic_tgt,
                        origin=corpus.ORIGIN_SYNTHETIC), args.max_ratio)
    dev = _read_pairs(args.dev_src, args.dev_tgt) if args.dev_src else None
    if args.src_vocab:
        src_vocab = corpus.Vocabulary.load(args.src_vocab)
        tgt_vocab = corpus.Vocabulary.load(args.tgt_vocab)
    else:
        src_vocab = corpus.build_vocabulary(
            [p.source for p in parallel] + [[corpus.NULL]], cfg.vocab_size)
        tgt_vocab = corpus.build_vocabulary(
            [p.target for p in parallel], cfg.vocab_size)
    checkpoints = training.train(cfg, src_vocab, tgt_vocab, parallel, mono=mono,
                                 synthetic=synthetic, dev=dev, out_dir=args.out,
                                 run_id=args.run_id)
    print(f"saved {len(checkpoints)} checkpoints under {args.out}")


def cmd_fine_tune(args):
    cfg = _load_train_config(args)
    data = _read_pairs(args.src, args.tgt)
    dev = _read_pairs(args.dev_src, args.dev_tgt) if args.dev_src else None
    ck = training.fine_tune(args.base, data, cfg, out_dir=args.out, dev=dev)
    print(f"fine-tuned model at {ck.path}")


def cmd_translate(args):
    bundles = [model.load_bundle(p)[0] for p in args.model.split(",")]
    bpe = subword.load_bpe(args.bpe) if args.bpe else None
    lines = corpus.read_lines(args.input)
    out, failures = decoding.translate_corpus(
        bundles, lines, _mode(args), bpe_model=bpe,
        keep_subwords=args.keep_subwords)
    corpus.write_lines(args.output, out)
    for idx, msg in failures:
        print(f"line {idx} failed: {msg}", file=sys.stderr)
    if failures:
        raise DataError(f"{len(failures)} lines failed to translate")


def cmd_backtranslate(args):
    bundle, _ = model.load_bundle(args.reverse_model)
    bpe = subword.load_bpe(args.bpe) if args.bpe else None
    if args.sample:
        mono_lines = backtranslation.sample_monolingual(args.mono, args.sample,
                                                        args.seed or 0)
    else:
        mono_lines = corpus.read_lines(args.mono)
    synth = backtranslation.back_translate(bundle, mono_lines, _mode(args),
                                           bpe_model=bpe, seed=args.seed or 0)
    corpus.write_lines(args.out_src, synth.source_lines)
    corpus.write_lines(args.out_tgt, synth.target_lines)
    if args.provenance:
        with open(args.provenance, "w", encoding="utf-8") as f:
            json.dump(synth.provenance, f, sort_keys=True, indent=2)
            f.write("\n")
    print(f"back-translated {len(mono_lines)} lines -> {args.out_src}")


def cmd_score_bleu(args):
    report = evaluation.bleu(corpus.read_lines(args.hyp),
                             corpus.read_lines(args.ref),
                             case_sensitive=not args.lowercase)
    print(f"BLEU = {report.bleu:.2f} "
          f"({'/'.join(f'{p * 100:.1f}' for p in report.precisions)}, "
          f"BP={report.brevity_penalty:.3f}, "
          f"hyp_len={report.hyp_len}, ref_len={report.ref_len})")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")


def cmd_score_ce(args):
    bundle, _ = model.load_bundle(args.model)
    pairs = _read_pairs(args.src, args.tgt)
    ce = evaluation.corpus_cross_entropy(bundle, [(p.source, p.target) for p in pairs])
    print(f"cross-entropy: {ce:.4f} bits/token")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump({"cross_entropy_bits_per_token": ce}, f, sort_keys=True, indent=2)
            f.write("\n")


def cmd_analyze_fluency(args):
    output_lines = corpus.read_lines(args.output_units)
    parallel_vocab = set()
    for path in args.parallel:
        for line in corpus.read_lines(path):
            parallel_vocab.update(line.split())
    mono = corpus.read_lines(args.mono) if args.mono else []
    refs = corpus.read_lines(args.ref) if args.ref else []
    report = evaluation.fluency_analysis(
        output_lines, parallel_vocab, mono, refs,
        rng=nn.make_rng(args.seed, "fluency-sample"), sample_n=args.sample_n,
        marker=args.marker)
    print(f"produced {report.produced} novel multi-unit words, "
          f"attested {report.attested * 100:.1f}%")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")


def cmd_emit_curves(args):
    logs = []
    for spec in args.log:
        if "=" in spec:
            run_id, path = spec.split("=", 1)
        else:
            import os
            run_id = os.path.splitext(os.path.basename(spec))[0]
            path = spec
        logs.append((run_id, path))
    evaluation.emit_curves(logs, args.out)
    print(f"curves -> {args.out}")


def cmd_run_profile(args):
    manifest = profiles.run_profile(args.profile, args.out, force=args.force)
    skipped = sum(1 for s in manifest["stages"].values() if s["skipped"])
    print(f"profile {manifest['profile']}: {len(manifest['stages'])} stages, "
          f"{skipped} skipped -> {args.out}")


def cmd_validate_config(args):
    problems = training.validate_config_file(args.config)
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        raise SystemExit(EXIT_DATA)
    print("config ok")


def cmd_make_toy_data(args):
    spec = toy.ToySpec(seed=args.seed, n_parallel=args.parallel, n_mono=args.mono,
                       n_dev=args.dev, n_test=args.test)
    data = toy.generate(spec)
    import os
    os.makedirs(args.out, exist_ok=True)
    toy.write_toy_files(data, args.out)
    print(f"toy corpus -> {args.out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="btx", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("bpe-learn", help="learn subword merges from text")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--merges", type=int, required=True)
    sp.add_argument("--marker", default=subword.DEFAULT_MARKER)
    sp.set_defaults(fn=cmd_bpe_learn)

    sp = sub.add_parser("bpe-apply", help="segment text with a learned model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(fn=cmd_bpe_apply)

    sp = sub.add_parser("bigram-apply", help="character-bigram segmentation")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--keep-top", type=int, default=20000,
                    help="most frequent words left unsegmented")
    sp.add_argument("--freq-from", help="corpus for the frequency count "
                                        "(defaults to the input)")
    sp.add_argument("--marker", default=subword.DEFAULT_MARKER)
    sp.set_defaults(fn=cmd_bigram_apply)

    sp = sub.add_parser("train", help="train a translation model")
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--mono", help="monolingual target text (dummy-source mixing)")
    sp.add_argument("--synthetic-src", dest="synthetic_src")
    sp.add_argument("--synthetic-tgt", dest="synthetic_tgt")
    sp.add_argument("--dev-src", dest="dev_src")
    sp.add_argument("--dev-tgt", dest="dev_tgt")
    sp.add_argument("--src-vocab", dest="src_vocab")
    sp.add_argument("--tgt-vocab", dest="tgt_vocab")
    sp.add_argument("--config", help="key=value or JSON config file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-ratio", type=float, default=9.0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--run-id", default="run")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("fine-tune", help="continue training a checkpoint")
    sp.add_argument("--base", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--dev-src", dest="dev_src")
    sp.add_argument("--dev-tgt", dest="dev_tgt")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_fine_tune)

    sp = sub.add_parser("translate", help="decode a corpus")
    sp.add_argument("--model", required=True,
                    help="checkpoint path, comma-separated for an ensemble")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--beam", type=int, help="beam width (default greedy)")
    sp.add_argument("--greedy", action="store_true")
    sp.add_argument("--bpe", help="subword model for segmentation")
    sp.add_argument("--keep-subwords", action="store_true",
                    help="emit subword units instead of words")
    sp.set_defaults(fn=cmd_translate)

    sp = sub.add_parser("backtranslate", help="build a synthetic parallel corpus")
    sp.add_argument("--reverse-model", dest="reverse_model", required=True)
    sp.add_argument("--mono", required=True)
    sp.add_argument("--sample", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--greedy", action="store_true")
    sp.add_argument("--bpe")
    sp.add_argument("--out-src", dest="out_src", required=True)
    sp.add_argument("--out-tgt", dest="out_tgt", required=True)
    sp.add_argument("--provenance")
    sp.set_defaults(fn=cmd_backtranslate)

    sp = sub.add_parser("score-bleu", help="corpus BLEU of hyp against ref")
    sp.add_argument("hyp")
    sp.add_argument("ref")
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--json", help="also write the report as JSON")
    sp.set_defaults(fn=cmd_score_bleu)

    sp = sub.add_parser("score-ce", help="model cross-entropy on a parallel corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--json")
    sp.set_defaults(fn=cmd_score_ce)

    sp = sub.add_parser("analyze-fluency",
                        help="novel subword-composed words in system output")
    sp.add_argument("--output-units", dest="output_units", required=True,
                    help="system output with subword markers kept")
    sp.add_argument("--parallel", nargs="+", required=True,
                    help="parallel training text (word vocabulary)")
    sp.add_argument("--mono")
    sp.add_argument("--ref")
    sp.add_argument("--sample-n", dest="sample_n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--marker", default=subword.DEFAULT_MARKER)
    sp.add_argument("--json")
    sp.set_defaults(fn=cmd_analyze_fluency)

    sp = sub.add_parser("emit-curves", help="learning curves from metrics logs")
    sp.add_argument("log", nargs="+", help="metrics CSV, optionally run_id=path")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(fn=cmd_emit_curves)

    sp = sub.add_parser("run-profile", help="execute an experiment profile")
    sp.add_argument("profile",
                    help=f"path or built-in: {', '.join(sorted(profiles.BUILTIN_PROFILES))}")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="rerun completed stages")
    sp.set_defaults(fn=cmd_run_profile)

    sp = sub.add_parser("validate-config", help="check a train config file")
    sp.add_argument("config")
    sp.set_defaults(fn=cmd_validate_config)

    sp = sub.add_parser("make-toy-data", help="generate the synthetic language pair")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--parallel", type=int, default=1000)
    sp.add_argument("--mono", type=int, default=10000)
    sp.add_argument("--dev", type=int, default=200)
    sp.add_argument("--test", type=int, default=200)
    sp.set_defaults(fn=cmd_make_toy_data)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        args.fn(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_DATA
    except profiles.StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (DataError, training.ConfigError, profiles.ProfileError,
            subword.SegmentationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
