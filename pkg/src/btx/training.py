"""Training loop for the three data regimes (parallel-only, +dummy-source
monolingual, +synthetic), with checkpointing, dev-score evaluation, early
stopping and fine-tuning.

Per minibatch: set freeze flags for the batch origin, perturb weights with
Gaussian noise, run the teacher-forced forward with output-layer dropout,
backpropagate, restore clean weights, clip the global gradient norm, and
take one SGD step.  Wall-clock checkpoint/eval triggers are replaced by
update counts so runs are deterministic.

The metrics log is CSV with columns update, epoch, train_ce_bits,
dev_ce_bits, dev_bleu, wall_seconds, instances.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import corpus, decoding, evaluation, model, nn, subword
from .corpus import DataError, MixedDataset, SentencePair


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    sort_window: int = 20
    clip_threshold: float = 1.0
    noise_stddev: float = 0.0
    dropout_p: float = 0.0
    mono_ratio: float = 0.0
    max_epochs: int = 10
    checkpoint_every_updates: int = 1000
    eval_every_updates: int = 200
    patience: int = 10
    seed: int = 1
    fine_tune_fixed_embeddings: bool = True
    embed_dim: int = 64
    hidden_dim: int = 128
    init_scale: float = 0.08
    vocab_size: int = 90000
    synthetic_cap: int = -1          # -1: no cap, use the whole synthetic pool
    bpe_marker: str = subword.DEFAULT_MARKER
    precision: str = "float64"
    max_updates: int = -1            # -1: no update cap
    train_ce_sample: int = 200

    def validate(self) -> list[str]:
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.sort_window < 1:
            problems.append("sort_window must be >= 1")
        if self.clip_threshold <= 0:
            problems.append("clip_threshold must be positive")
        if self.noise_stddev < 0:
            problems.append("noise_stddev must be >= 0")
        if not 0 <= self.dropout_p < 1:
            problems.append("dropout_p must be in [0, 1): inverted dropout divides by 1-p")
        if self.mono_ratio < 0:
            problems.append("mono_ratio must be >= 0")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if self.checkpoint_every_updates < 1:
            problems.append("checkpoint_every_updates must be >= 1")
        if self.eval_every_updates < 1:
            problems.append("eval_every_updates must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            problems.append("embed_dim and hidden_dim must be >= 1")
        if self.init_scale <= 0:
            problems.append("init_scale must be positive")
        if self.vocab_size < 3:
            problems.append("vocab_size must be >= 3")
        if self.precision not in ("float64", "float32"):
            problems.append("precision must be float64 or float32")
        if self.train_ce_sample < 1:
            problems.append("train_ce_sample must be >= 1")
        return problems

    def check(self) -> "TrainConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Config files: flat key=value text, or JSON when the file starts with '{'


def parse_config_text(text: str) -> dict:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected key=value, got {raw!r}"])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if isinstance(value, str):
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"{name}: cannot parse {value!r} as a boolean")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    if kind == "float" and isinstance(value, int):
        return float(value)
    return value


def config_from_dict(d: dict) -> tuple[TrainConfig, list[str]]:
    """Build a config from a parsed file, returning (config, diagnostics).

    Unknown keys, uncoercible values and out-of-range values are reported;
    the returned config uses whatever valid values were given.
    """
    problems = []
    kwargs = {}
    for key, value in d.items():
        if key not in _FIELD_TYPES:
            problems.append(f"unknown key: {key}")
            continue
        try:
            kwargs[key] = _coerce(key, value)
        except (TypeError, ValueError) as e:
            problems.append(f"bad value for {key}: {e}")
    cfg = TrainConfig(**kwargs)
    problems.extend(cfg.validate())
    return cfg, problems


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        cfg, problems = config_from_dict(parse_config_text(f.read()))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate_config_file(path) -> list[str]:
    """Diagnostics for a config file; empty list means it validates clean."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        return [f"unreadable config file: {e}"]
    try:
        parsed = parse_config_text(text)
    except (ConfigError, json.JSONDecodeError) as e:
        return [f"unparseable config file: {e}"]
    _, problems = config_from_dict(parsed)
    return problems


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    path: str
    kind: str                 # periodic | best | final
    update: int
    epoch: int
    dev_bleu: float | None = None
    dev_ce_bits: float | None = None
    manifest: dict = field(default_factory=dict, repr=False)

    def load(self) -> model.ModelBundle:
        bundle, _ = model.load_bundle(self.path)
        return bundle


def _save_checkpoint(path, bundle: model.ModelBundle, *, kind: str, update: int,
                     epoch: int, instances: int, cfg_hash: str, rng_state,
                     dev_bleu, dev_ce_bits, run_id: str) -> Checkpoint:
    extra = {
        "kind": kind,
        "update": update,
        "epoch": epoch,
        "instances": instances,
        "config_hash": cfg_hash,
        "run_id": run_id,
        "rng_state": rng_state,
        "dev_bleu": dev_bleu,
        "dev_ce_bits": dev_ce_bits,
    }
    tmp = str(path) + ".tmp"
    model.save_bundle(tmp, bundle, extra=extra)
    os.replace(tmp, path)
    sidecar = {"config_hash": cfg_hash, "update": update, "epoch": epoch,
               "dev_bleu": dev_bleu, "dev_ce_bits": dev_ce_bits, "kind": kind,
               "run_id": run_id}
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")
    return Checkpoint(path=str(path), kind=kind, update=update, epoch=epoch,
                      dev_bleu=dev_bleu, dev_ce_bits=dev_ce_bits, manifest=extra)


def early_stop(history: list[float], patience: int) -> bool:
    """Stop once the best score is older than `patience` evaluations."""
    if not history:
        raise ValueError("history must be non-empty")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best_idx = int(np.argmax(history))
    return (len(history) - 1 - best_idx) >= patience


def select_ensemble(checkpoints: list[Checkpoint], k: int) -> list[Checkpoint]:
    """The last k saved models of a run (periodic saves when present)."""
    periodic = [c for c in checkpoints if c.kind == "periodic"]
    pool = periodic if periodic else list(checkpoints)
    if k > len(pool):
        raise ValueError(f"asked for {k} checkpoints but only {len(pool)} available")
    return pool[-k:]


def best_checkpoint(checkpoints: list[Checkpoint]) -> Checkpoint:
    """First checkpoint with the highest dev BLEU (for cross-run ensembles)."""
    scored = [c for c in checkpoints if c.dev_bleu is not None]
    if not scored:
        raise ValueError("no checkpoint carries a dev score")
    best = scored[0]
    for c in scored[1:]:
        if c.dev_bleu > best.dev_bleu:
            best = c
    return best


# ---------------------------------------------------------------------------
# The training loop


def _desegmented_line(tokens, marker: str) -> str:
    return " ".join(subword.desegment_tokens(tokens, marker))


def _dev_scores(bundle: model.ModelBundle, dev_pairs, marker: str):
    """Dev cross-entropy (bits/token) and greedy-decoding BLEU."""
    dev_ce = evaluation.corpus_cross_entropy(
        bundle, [(p.source, p.target) for p in dev_pairs])
    src_ids = [corpus.encode_sentence(bundle.src_vocab, p.source) for p in dev_pairs]
    hyps = decoding._greedy_decode_batch([bundle.params], src_ids)
    hyp_lines = [_desegmented_line(decoding.hypothesis_tokens(h, bundle.tgt_vocab), marker)
                 for h in hyps]
    ref_lines = [_desegmented_line(list(p.target), marker) for p in dev_pairs]
    dev_bleu = evaluation.bleu(hyp_lines, ref_lines).bleu
    return dev_ce, dev_bleu


def train(config: TrainConfig, src_vocab: corpus.Vocabulary,
          tgt_vocab: corpus.Vocabulary, parallel: list[SentencePair],
          mono=None, synthetic=None, dev=None, out_dir=".", run_id: str = "run",
          init_bundle: model.ModelBundle | None = None,
          on_minibatch=None) -> list[Checkpoint]:
    """Run minibatch SGD over the mixed dataset; returns saved checkpoints.

    `synthetic` pairs join the parallel pool undistinguished (no freezing);
    `mono` sentences enter each epoch as freshly resampled dummy-source
    pairs at `config.mono_ratio`, and encoder/attention groups are frozen
    while such a minibatch is being trained.  Everything is deterministic
    given (config, data): the same run produces byte-identical checkpoints.
    """
    config.check()
    if not parallel and config.max_epochs > 0:
        raise DataError("training needs a non-empty parallel (or synthetic) pool")
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = config_hash(config)
    dtype = config.dtype

    if init_bundle is not None:
        params = init_bundle.params
        src_vocab, tgt_vocab = init_bundle.src_vocab, init_bundle.tgt_vocab
    else:
        dims = model.Dims(embed=config.embed_dim, hidden=config.hidden_dim,
                          src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab))
        params = model.init_params(dims, nn.make_rng(config.seed, "init"),
                                   dtype=dtype, init_scale=config.init_scale)
    bundle = model.ModelBundle(params=params, src_vocab=src_vocab, tgt_vocab=tgt_vocab)

    synthetic = list(synthetic) if synthetic else []
    for pair in synthetic:
        if pair.origin != corpus.ORIGIN_SYNTHETIC:
            raise DataError("synthetic pairs must carry origin=synthetic")
    cap = None if config.synthetic_cap < 0 else config.synthetic_cap
    if synthetic and cap is None:
        pool = list(parallel) + synthetic
        ds = MixedDataset(parallel=pool, mono_pool=list(mono or []),
                          ratio=config.mono_ratio, seed=config.seed)
    else:
        ds = MixedDataset(parallel=list(parallel), mono_pool=list(mono or []),
                          ratio=config.mono_ratio, seed=config.seed,
                          synthetic_pool=synthetic, synthetic_cap=cap)

    # fixed parallel sample for the training cross-entropy curve
    sample_rng = nn.make_rng(config.seed, "train-ce-sample")
    sample_size = min(config.train_ce_sample, len(parallel))
    sample_idx = sample_rng.permutation(len(parallel))[:sample_size]
    ce_sample = [(parallel[i].source, parallel[i].target) for i in sample_idx]

    train_rng = nn.make_rng(config.seed, "train")
    metrics_path = os.path.join(out_dir, f"{run_id}-metrics.csv")
    metrics = open(metrics_path, "w", encoding="utf-8", newline="\n")
    metrics.write("update,epoch,train_ce_bits,dev_ce_bits,dev_bleu,wall_seconds,instances\n")

    checkpoints: list[Checkpoint] = []
    bleu_history: list[float] = []
    best: Checkpoint | None = None
    update = 0
    instances = 0
    start = time.monotonic()
    stopping = False
    all_params = params.parameters()

    def save(kind: str, epoch: int, name: str) -> Checkpoint:
        model.freeze_for_origin(params, corpus.ORIGIN_PARALLEL)
        ck = _save_checkpoint(
            os.path.join(out_dir, name), bundle, kind=kind, update=update,
            epoch=epoch, instances=instances, cfg_hash=cfg_hash,
            rng_state=train_rng.bit_generator.state,
            dev_bleu=bleu_history[-1] if bleu_history else None,
            dev_ce_bits=last_dev_ce, run_id=run_id)
        checkpoints.append(ck)
        return ck

    last_dev_ce = None

    def evaluate(epoch: int) -> None:
        nonlocal best, last_dev_ce, stopping
        model.freeze_for_origin(params, corpus.ORIGIN_PARALLEL)
        train_ce = (evaluation.corpus_cross_entropy(bundle, ce_sample)
                    if ce_sample else float("nan"))
        dev_ce = dev_bleu = None
        if dev:
            dev_ce, dev_bleu = _dev_scores(bundle, dev, config.bpe_marker)
            last_dev_ce = dev_ce
            bleu_history.append(dev_bleu)
        wall = time.monotonic() - start
        metrics.write(f"{update},{epoch},{train_ce:.6f},"
                      f"{'' if dev_ce is None else f'{dev_ce:.6f}'},"
                      f"{'' if dev_bleu is None else f'{dev_bleu:.4f}'},"
                      f"{wall:.3f},{instances}\n")
        metrics.flush()
        if dev:
            if best is None or dev_bleu > best.dev_bleu:
                best = save("best", epoch, "best.btx")
            if early_stop(bleu_history, config.patience):
                stopping = True

    try:
        epoch = -1
        for epoch in range(config.max_epochs):
            stream = corpus.epoch_stream(ds, epoch)
            batches = corpus.make_minibatches(stream, config.batch_size,
                                              config.sort_window)
            for mb in batches:
                origin = mb.origin
                model.freeze_for_origin(params, origin)
                handle = nn.add_gaussian_noise(all_params, config.noise_stddev,
                                               train_rng)
                src_ids, src_mask, tgt_ids, tgt_mask = corpus.pad_encode(
                    mb, src_vocab, tgt_vocab)
                loss, _ = model.batch_nll(params, src_ids, src_mask, tgt_ids,
                                          tgt_mask, train_mode=True,
                                          rng=train_rng,
                                          dropout_p=config.dropout_p)
                nn.backward(loss)
                nn.restore_weights(handle)
                nn.clip_gradients(all_params, config.clip_threshold)
                nn.sgd_step(all_params, config.learning_rate)
                update += 1
                instances += len(mb)
                if on_minibatch is not None:
                    on_minibatch(update, mb, params)
                if update % config.eval_every_updates == 0:
                    evaluate(epoch)
                if update % config.checkpoint_every_updates == 0:
                    save("periodic", epoch, f"ckpt-{update:07d}.btx")
                if stopping or (0 <= config.max_updates <= update):
                    break
            if stopping or (0 <= config.max_updates <= update):
                break
        final_epoch = epoch + 1
        if update == 0 or update % config.eval_every_updates != 0:
            evaluate(final_epoch)
        save("final", final_epoch, "final.btx")
    finally:
        metrics.close()
    return checkpoints


def fine_tune(base, data: list[SentencePair], config: TrainConfig, out_dir=".",
              dev=None, run_id: str = "finetune") -> Checkpoint:
    """Continue training an existing checkpoint on new data.

    With config.fine_tune_fixed_embeddings the embedding matrices stay
    bit-identical.  Zero epochs is the identity (the result reproduces the
    base model).
    """
    if isinstance(base, Checkpoint):
        bundle = base.load()
    elif isinstance(base, model.ModelBundle):
        bundle = model.ModelBundle(model.clone_params(base.params),
                                   base.src_vocab, base.tgt_vocab)
    else:
        bundle, _ = model.load_bundle(base)
    if not data and config.max_epochs > 0:
        raise DataError("fine-tuning needs data")
    if config.fine_tune_fixed_embeddings:
        bundle.params.pinned_groups = frozenset({"src-embed", "tgt-embed"})
    try:
        checkpoints = train(config, bundle.src_vocab, bundle.tgt_vocab,
                            parallel=list(data), dev=dev, out_dir=out_dir,
                            run_id=run_id, init_bundle=bundle)
    finally:
        bundle.params.pinned_groups = frozenset()
    if dev:
        try:
            return best_checkpoint(checkpoints)
        except ValueError:
            pass
    return checkpoints[-1]
