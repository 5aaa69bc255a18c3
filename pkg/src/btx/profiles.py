"""Experiment profiles: declarative multi-stage pipelines (data prep,
subword learning, training, back-translation, decoding, scoring) with
content-hash resumability.

A profile is JSON: {"name": ..., "seed": ..., "stages": [{"name", "kind",
"config"}, ...]}.  Stage configs reference earlier outputs by relative path
"<stage>/<file>".  Every stage gets a fingerprint chaining its own config,
the global seed and all preceding fingerprints; a stage whose fingerprint
and outputs are already on disk is skipped, so interrupted profiles resume.
The environment variable BTX_SEED overrides the profile seed (for sweeps).

Built-in profiles `toy-backtranslation` and `toy-dummy-source` run the two
monolingual-data strategies end to end on the synthetic language pair.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil

from . import backtranslation, corpus, decoding, evaluation, model, subword, toy, training
from .corpus import DataError


class ProfileError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


STAGE_KINDS = (
    "make-toy-data",
    "learn-bpe",
    "apply-bpe",
    "build-vocab",
    "train",
    "backtranslate",
    "translate",
    "score-bleu",
    "score-ce",
)


def validate_profile(profile: dict) -> list[str]:
    problems = []
    if not isinstance(profile, dict):
        return ["profile must be a JSON object"]
    if not isinstance(profile.get("name"), str):
        problems.append("missing or non-string 'name'")
    if not isinstance(profile.get("seed"), int):
        problems.append("missing or non-integer 'seed'")
    stages = profile.get("stages")
    if not isinstance(stages, list) or not stages:
        problems.append("missing or empty 'stages' list")
        return problems
    names = set()
    for i, stage in enumerate(stages):
        where = f"stage {i}"
        if not isinstance(stage, dict):
            problems.append(f"{where}: must be an object")
            continue
        name = stage.get("name")
        if not isinstance(name, str) or not name:
            problems.append(f"{where}: missing 'name'")
        elif name in names:
            problems.append(f"{where}: duplicate name {name!r}")
        else:
            names.add(name)
        kind = stage.get("kind")
        if kind not in STAGE_KINDS:
            problems.append(f"{where}: unknown kind {kind!r}")
        if not isinstance(stage.get("config", {}), dict):
            problems.append(f"{where}: 'config' must be an object")
    return problems


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Runner:
    def __init__(self, profile: dict, out_dir: str):
        self.profile = profile
        self.out = out_dir
        self.seed = int(os.environ.get("BTX_SEED", profile["seed"]))

    def path(self, rel: str) -> str:
        return os.path.join(self.out, rel)

    # ---- stage implementations; each returns a list of relative output paths

    def run_make_toy_data(self, stage_dir, cfg):
        spec = toy.ToySpec(
            seed=training.nn.derive_seed(self.seed, "toy-data") % (2 ** 31),
            n_words=cfg.get("n_words", 50),
            n_parallel=cfg.get("n_parallel", 1000),
            n_mono=cfg.get("n_mono", 10000),
            n_dev=cfg.get("n_dev", 200),
            n_test=cfg.get("n_test", 200),
            word_lo=cfg.get("word_lo", 0),
            word_hi=cfg.get("word_hi"),
        )
        data = toy.generate(spec)
        paths = toy.write_toy_files(data, stage_dir)
        return sorted(paths)

    def run_learn_bpe(self, stage_dir, cfg):
        lines = []
        for rel in cfg["inputs"]:
            lines.extend(corpus.read_lines(self.path(rel)))
        freqs = subword.word_counts(lines)
        bpe = subword.bpe_learn(freqs, int(cfg["num_merges"]),
                                marker=cfg.get("marker", subword.DEFAULT_MARKER))
        subword.save_bpe(bpe, os.path.join(stage_dir, "bpe.model"))
        return ["bpe.model"]

    def run_apply_bpe(self, stage_dir, cfg):
        bpe = subword.load_bpe(self.path(cfg["model"]))
        outs = []
        for rel in cfg["inputs"]:
            lines = corpus.read_lines(self.path(rel))
            segged = [" ".join(subword.segment_tokens(bpe, line.split()))
                      for line in lines]
            name = os.path.basename(rel) + ".bpe"
            corpus.write_lines(os.path.join(stage_dir, name), segged)
            outs.append(name)
        return outs

    def run_build_vocab(self, stage_dir, cfg):
        stream = []
        for rel in cfg["inputs"]:
            stream.extend(line.split() for line in corpus.read_lines(self.path(rel)))
        if cfg.get("include_inventory"):
            bpe = subword.load_bpe(self.path(cfg["model"]))
            alphabet = set()
            for sent in stream:
                for tok in sent:
                    alphabet.update(tok)
            alphabet -= {bpe.marker}
            stream.append(sorted(subword.unit_inventory(bpe, alphabet)))
        vocab = corpus.build_vocabulary(stream, int(cfg["max_size"]))
        vocab.save(os.path.join(stage_dir, "vocab.txt"))
        return ["vocab.txt"]

    def _load_pairs(self, src_rel, tgt_rel, origin=corpus.ORIGIN_PARALLEL):
        pairs = corpus.load_parallel(self.path(src_rel), self.path(tgt_rel),
                                     origin=origin)
        return corpus.filter_pairs(pairs, 9.0)

    def run_train(self, stage_dir, cfg):
        overrides = dict(cfg.get("config", {}))
        overrides.setdefault("seed", self.seed)
        tcfg, problems = training.config_from_dict(overrides)
        if problems:
            raise training.ConfigError(problems)
        src_vocab = corpus.Vocabulary.load(self.path(cfg["src_vocab"]))
        tgt_vocab = corpus.Vocabulary.load(self.path(cfg["tgt_vocab"]))
        parallel = self._load_pairs(cfg["src"], cfg["tgt"])
        mono = None
        if cfg.get("mono"):
            mono = [tuple(line.split()) for line in corpus.read_lines(self.path(cfg["mono"]))]
        synthetic = None
        if cfg.get("synthetic_src"):
            synthetic = self._load_pairs(cfg["synthetic_src"], cfg["synthetic_tgt"],
                                         origin=corpus.ORIGIN_SYNTHETIC)
        dev = None
        if cfg.get("dev_src"):
            dev = self._load_pairs(cfg["dev_src"], cfg["dev_tgt"])
        if cfg.get("init"):
            base = model.load_bundle(self.path(cfg["init"]))[0]
            if tcfg.fine_tune_fixed_embeddings and cfg.get("fine_tune"):
                ck = training.fine_tune(base, parallel, tcfg, out_dir=stage_dir,
                                        dev=dev, run_id="run")
            else:
                training.train(tcfg, src_vocab, tgt_vocab, parallel, mono=mono,
                               synthetic=synthetic, dev=dev, out_dir=stage_dir,
                               run_id="run", init_bundle=base)
        else:
            training.train(tcfg, src_vocab, tgt_vocab, parallel, mono=mono,
                           synthetic=synthetic, dev=dev, out_dir=stage_dir,
                           run_id="run")
        outs = [f for f in sorted(os.listdir(stage_dir))
                if f.endswith((".btx", ".json", ".csv"))]
        return outs

    def run_backtranslate(self, stage_dir, cfg):
        bundle, _ = model.load_bundle(self.path(cfg["reverse_model"]))
        bpe = subword.load_bpe(self.path(cfg["bpe"])) if cfg.get("bpe") else None
        sample_seed = training.nn.derive_seed(self.seed, "backtranslate") % (2 ** 31)
        n = cfg.get("sample")
        if n:
            mono_lines = backtranslation.sample_monolingual(
                self.path(cfg["mono"]), int(n), sample_seed)
        else:
            mono_lines = corpus.read_lines(self.path(cfg["mono"]))
        mode = "greedy" if cfg.get("mode", "greedy") == "greedy" \
            else ("beam", int(cfg.get("beam", 12)))
        synth = backtranslation.back_translate(bundle, mono_lines, mode,
                                               bpe_model=bpe, seed=sample_seed)
        corpus.write_lines(os.path.join(stage_dir, "synthetic.src"), synth.source_lines)
        corpus.write_lines(os.path.join(stage_dir, "synthetic.tgt"), synth.target_lines)
        with open(os.path.join(stage_dir, "provenance.json"), "w", encoding="utf-8") as f:
            json.dump(synth.provenance, f, sort_keys=True, indent=2)
            f.write("\n")
        return ["synthetic.src", "synthetic.tgt", "provenance.json"]

    def run_translate(self, stage_dir, cfg):
        bundles = [model.load_bundle(self.path(rel))[0] for rel in cfg["models"]]
        bpe = subword.load_bpe(self.path(cfg["bpe"])) if cfg.get("bpe") else None
        lines = corpus.read_lines(self.path(cfg["input"]))
        mode = "greedy" if cfg.get("mode", "greedy") == "greedy" \
            else ("beam", int(cfg.get("beam", 12)))
        out_lines, failures = decoding.translate_corpus(
            bundles, lines, mode, bpe_model=bpe,
            keep_subwords=bool(cfg.get("keep_subwords", False)))
        corpus.write_lines(os.path.join(stage_dir, "output.txt"), out_lines)
        if failures:
            raise DataError(f"{len(failures)} lines failed to translate")
        return ["output.txt"]

    def run_score_bleu(self, stage_dir, cfg):
        hyp = corpus.read_lines(self.path(cfg["hyp"]))
        ref = corpus.read_lines(self.path(cfg["ref"]))
        report = evaluation.bleu(hyp, ref,
                                 case_sensitive=cfg.get("case_sensitive", True))
        with open(os.path.join(stage_dir, "bleu.json"), "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        return ["bleu.json"]

    def run_score_ce(self, stage_dir, cfg):
        bundle, _ = model.load_bundle(self.path(cfg["model"]))
        pairs = self._load_pairs(cfg["src"], cfg["tgt"])
        ce = evaluation.corpus_cross_entropy(
            bundle, [(p.source, p.target) for p in pairs])
        with open(os.path.join(stage_dir, "ce.json"), "w", encoding="utf-8") as f:
            json.dump({"cross_entropy_bits_per_token": ce}, f, sort_keys=True, indent=2)
            f.write("\n")
        return ["ce.json"]


def run_profile(profile, out_dir, force: bool = False) -> dict:
    """Execute a profile (dict, path, or built-in name); returns the
    artifact manifest.  Completed stages are skipped unless forced."""
    if isinstance(profile, str):
        if profile in BUILTIN_PROFILES:
            profile = BUILTIN_PROFILES[profile]()
        else:
            with open(profile, encoding="utf-8") as f:
                profile = json.load(f)
    problems = validate_profile(profile)
    if problems:
        raise ProfileError("; ".join(problems))
    os.makedirs(out_dir, exist_ok=True)
    runner = _Runner(profile, out_dir)
    manifest = {"profile": profile["name"], "seed": runner.seed, "stages": {}}
    chain = hashlib.sha256(str(runner.seed).encode()).hexdigest()
    for stage in profile["stages"]:
        name, kind = stage["name"], stage["kind"]
        cfg = stage.get("config", {})
        chain = hashlib.sha256(
            (chain + _canonical({"kind": kind, "name": name, "config": cfg})).encode()
        ).hexdigest()
        stage_dir = os.path.join(out_dir, name)
        fp_path = os.path.join(stage_dir, ".fingerprint")
        outputs_path = os.path.join(stage_dir, ".outputs.json")
        skipped = False
        if not force and os.path.exists(fp_path) and os.path.exists(outputs_path):
            with open(fp_path) as f:
                old = f.read().strip()
            with open(outputs_path) as f:
                outs = json.load(f)
            if old == chain and all(os.path.exists(os.path.join(stage_dir, o))
                                    for o in outs):
                skipped = True
        if not skipped:
            if os.path.isdir(stage_dir):
                shutil.rmtree(stage_dir)
            os.makedirs(stage_dir)
            fn = getattr(runner, "run_" + kind.replace("-", "_"))
            try:
                outs = fn(stage_dir, cfg)
            except Exception as e:
                raise StageFailure(name, e) from e
            with open(fp_path, "w") as f:
                f.write(chain + "\n")
            with open(outputs_path, "w") as f:
                json.dump(outs, f)
        else:
            with open(outputs_path) as f:
                outs = json.load(f)
        manifest["stages"][name] = {
            "kind": kind,
            "fingerprint": chain,
            "skipped": skipped,
            "outputs": {
                o: _sha256_file(os.path.join(stage_dir, o)) for o in outs
            },
        }
    with open(os.path.join(out_dir, "artifacts.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# Built-in profiles


TOY_TRAIN_DEFAULTS = {
    "learning_rate": 0.5,
    "batch_size": 16,
    "sort_window": 20,
    "clip_threshold": 1.0,
    "max_epochs": 20,
    "eval_every_updates": 250,
    "checkpoint_every_updates": 1000,
    "patience": 12,
    "embed_dim": 32,
    "hidden_dim": 48,
    "train_ce_sample": 150,
}


def _toy_common_stages() -> list[dict]:
    return [
        {"name": "data", "kind": "make-toy-data",
         "config": {"n_parallel": 1000, "n_mono": 10000, "n_dev": 200, "n_test": 200}},
        {"name": "bpe", "kind": "learn-bpe",
         "config": {"inputs": ["data/train.src", "data/train.tgt"], "num_merges": 60}},
        {"name": "seg", "kind": "apply-bpe",
         "config": {"model": "bpe/bpe.model",
                    "inputs": ["data/train.src", "data/train.tgt",
                               "data/dev.src", "data/dev.tgt",
                               "data/test.src", "data/test.tgt",
                               "data/mono.txt"]}},
        {"name": "vocab-src", "kind": "build-vocab",
         "config": {"inputs": ["seg/train.src.bpe"], "max_size": 200,
                    "include_inventory": True, "model": "bpe/bpe.model"}},
        {"name": "vocab-tgt", "kind": "build-vocab",
         "config": {"inputs": ["seg/train.tgt.bpe"], "max_size": 200,
                    "include_inventory": True, "model": "bpe/bpe.model"}},
    ]


def toy_backtranslation_profile() -> dict:
    """Baseline vs +synthetic: train a reverse model, back-translate the
    monolingual pool, retrain with the synthetic corpus, compare test BLEU."""
    stages = _toy_common_stages() + [
        {"name": "baseline", "kind": "train",
         "config": {"src": "seg/train.src.bpe", "tgt": "seg/train.tgt.bpe",
                    "dev_src": "seg/dev.src.bpe", "dev_tgt": "seg/dev.tgt.bpe",
                    "src_vocab": "vocab-src/vocab.txt", "tgt_vocab": "vocab-tgt/vocab.txt",
                    "config": dict(TOY_TRAIN_DEFAULTS)}},
        {"name": "reverse", "kind": "train",
         "config": {"src": "seg/train.tgt.bpe", "tgt": "seg/train.src.bpe",
                    "dev_src": "seg/dev.tgt.bpe", "dev_tgt": "seg/dev.src.bpe",
                    "src_vocab": "vocab-tgt/vocab.txt", "tgt_vocab": "vocab-src/vocab.txt",
                    "config": dict(TOY_TRAIN_DEFAULTS)}},
        {"name": "synthesize", "kind": "backtranslate",
         "config": {"reverse_model": "reverse/best.btx", "mono": "data/mono.txt",
                    "mode": "beam", "beam": 12, "bpe": "bpe/bpe.model"}},
        {"name": "forward", "kind": "train",
         "config": {"src": "seg/train.src.bpe", "tgt": "seg/train.tgt.bpe",
                    "synthetic_src": "synthesize/synthetic.src",
                    "synthetic_tgt": "synthesize/synthetic.tgt",
                    "dev_src": "seg/dev.src.bpe", "dev_tgt": "seg/dev.tgt.bpe",
                    "src_vocab": "vocab-src/vocab.txt", "tgt_vocab": "vocab-tgt/vocab.txt",
                    "config": dict(TOY_TRAIN_DEFAULTS,
                                   synthetic_cap=1000, max_epochs=20)}},
        {"name": "decode-baseline", "kind": "translate",
         "config": {"models": ["baseline/best.btx"], "input": "data/test.src",
                    "bpe": "bpe/bpe.model", "mode": "greedy"}},
        {"name": "decode-forward", "kind": "translate",
         "config": {"models": ["forward/best.btx"], "input": "data/test.src",
                    "bpe": "bpe/bpe.model", "mode": "greedy"}},
        {"name": "score-baseline", "kind": "score-bleu",
         "config": {"hyp": "decode-baseline/output.txt", "ref": "data/test.tgt"}},
        {"name": "score-forward", "kind": "score-bleu",
         "config": {"hyp": "decode-forward/output.txt", "ref": "data/test.tgt"}},
    ]
    return {"name": "toy-backtranslation", "seed": 1234, "stages": stages}


def toy_dummy_source_profile() -> dict:
    """Baseline vs 1-to-1 dummy-source monolingual mixing (with encoder and
    attention frozen on the monolingual minibatches)."""
    stages = _toy_common_stages() + [
        {"name": "baseline", "kind": "train",
         "config": {"src": "seg/train.src.bpe", "tgt": "seg/train.tgt.bpe",
                    "dev_src": "seg/dev.src.bpe", "dev_tgt": "seg/dev.tgt.bpe",
                    "src_vocab": "vocab-src/vocab.txt", "tgt_vocab": "vocab-tgt/vocab.txt",
                    "config": dict(TOY_TRAIN_DEFAULTS)}},
        {"name": "mono-mixed", "kind": "train",
         "config": {"src": "seg/train.src.bpe", "tgt": "seg/train.tgt.bpe",
                    "mono": "seg/mono.txt.bpe",
                    "dev_src": "seg/dev.src.bpe", "dev_tgt": "seg/dev.tgt.bpe",
                    "src_vocab": "vocab-src/vocab.txt", "tgt_vocab": "vocab-tgt/vocab.txt",
                    "config": dict(TOY_TRAIN_DEFAULTS, mono_ratio=1.0)}},
        {"name": "decode-baseline", "kind": "translate",
         "config": {"models": ["baseline/best.btx"], "input": "data/test.src",
                    "bpe": "bpe/bpe.model", "mode": "greedy"}},
        {"name": "decode-mono", "kind": "translate",
         "config": {"models": ["mono-mixed/best.btx"], "input": "data/test.src",
                    "bpe": "bpe/bpe.model", "mode": "greedy"}},
        {"name": "score-baseline", "kind": "score-bleu",
         "config": {"hyp": "decode-baseline/output.txt", "ref": "data/test.tgt"}},
        {"name": "score-mono", "kind": "score-bleu",
         "config": {"hyp": "decode-mono/output.txt", "ref": "data/test.tgt"}},
    ]
    return {"name": "toy-dummy-source", "seed": 1234, "stages": stages}


BUILTIN_PROFILES = {
    "toy-backtranslation": toy_backtranslation_profile,
    "toy-dummy-source": toy_dummy_source_profile,
}
