"""Greedy, beam-search and ensemble decoding.

Ensembles combine member models by averaging their per-step output
distributions in probability space.  The returned hypothesis is the
finished one with the best length-normalized score (accumulated natural-log
probability divided by length); raw accumulated score is available for
oracle comparisons.  If nothing finished within the length budget, the best
live hypothesis is returned unfinished.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corpus, model, nn, subword
from .corpus import EOS_ID


@dataclass
class Hypothesis:
    ids: list[int]
    logprob: float
    state: object
    finished: bool

    def score(self, length_normalize: bool = True) -> float:
        if length_normalize and self.ids:
            return self.logprob / len(self.ids)
        return self.logprob


def default_max_len(src_len: int) -> int:
    return 3 * src_len + 10


def _check_models(models: list[model.ModelParams]) -> None:
    if not models:
        raise ValueError("need at least one model")
    sizes = {m.dims.tgt_vocab for m in models}
    if len(sizes) != 1:
        raise ValueError(f"ensemble members disagree on target vocabulary size: {sizes}")


class _EnsembleRun:
    """Per-sentence decoding context: encoder outputs and batched stepping
    for every ensemble member."""

    def __init__(self, models: list[model.ModelParams], src_ids):
        _check_models(models)
        src_ids = np.asarray(src_ids, dtype=np.int64)
        if src_ids.size == 0:
            raise ValueError("cannot decode an empty source")
        self.models = models
        self.contexts = []
        for m in models:
            g = model._Graph(m)
            ann, uh, attn_mask, bwd_first = model._encode_graph(
                g, src_ids[None, :], np.ones((1, src_ids.size)))
            s0 = model._init_state_graph(g, bwd_first)
            self.contexts.append((g, ann.value[0], uh.value[0], s0.value[0]))

    def initial_states(self) -> list[np.ndarray]:
        return [ctx[3] for ctx in self.contexts]

    def step(self, states: list[np.ndarray], y_prev: np.ndarray):
        """Advance `k` hypotheses one step for every member.

        states: per member an array (k, hidden); y_prev: (k,) previous token
        ids, -1 meaning begin-of-sequence.  Returns (new states, mean
        probabilities (k, V)).
        """
        k = y_prev.shape[0]
        probs = None
        new_states = []
        for mi, m in enumerate(self.models):
            g, ann, uh, _ = self.contexts[mi]
            ann_node = nn.const(np.repeat(ann[None, :, :], k, axis=0))
            uh_node = nn.const(np.repeat(uh[None, :, :], k, axis=0))
            e_prev_val = np.zeros((k, m.dims.embed), dtype=m.dtype)
            known = y_prev >= 0
            if known.any():
                e_prev_val[known] = m.tgt_embed.value[y_prev[known]]
            s, _, logits = model._decoder_step_graph(
                g, nn.const(np.asarray(states[mi])),
                nn.const(e_prev_val), ann_node, uh_node, None,
                train_mode=False, rng=None, dropout_p=0.0)
            p = np.exp(nn.log_softmax(logits.value, axis=-1))
            probs = p if probs is None else probs + p
            new_states.append(s.value)
        return new_states, probs / len(self.models)


def greedy_decode(models: list[model.ModelParams], src_ids,
                  max_len: int | None = None) -> Hypothesis:
    """Argmax token each step until <eos> or max_len."""
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    run = _EnsembleRun(models, src_ids)
    states = [s[None, :] for s in run.initial_states()]
    ids: list[int] = []
    logprob = 0.0
    finished = False
    y_prev = np.array([-1])
    for _ in range(max_len):
        states, probs = run.step(states, y_prev)
        tok = int(np.argmax(probs[0]))
        logprob += float(np.log(probs[0, tok]))
        ids.append(tok)
        if tok == EOS_ID:
            finished = True
            break
        y_prev = np.array([tok])
    return Hypothesis(ids=ids, logprob=logprob, state=None, finished=finished)


def beam_search(models: list[model.ModelParams], src_ids, beam: int,
                max_len: int | None = None,
                length_normalize: bool = True) -> Hypothesis:
    """Keep the `beam` best partial hypotheses per step; finished hypotheses
    retire into a pool and the best one by (optionally length-normalized)
    score wins."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    run = _EnsembleRun(models, src_ids)
    live: list[Hypothesis] = [
        Hypothesis(ids=[], logprob=0.0, state=run.initial_states(), finished=False)
    ]
    pool: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        k = len(live)
        states = [np.stack([h.state[mi] for h in live]) for mi in range(len(models))]
        y_prev = np.array([h.ids[-1] if h.ids else -1 for h in live])
        states, probs = run.step(states, y_prev)
        logp = np.log(np.maximum(probs, 1e-300))
        scores = np.array([h.logprob for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        top = np.argsort(-flat, kind="stable")[:beam]
        next_live = []
        vocab = probs.shape[1]
        for cand in top:
            hi, tok = divmod(int(cand), vocab)
            parent = live[hi]
            child = Hypothesis(
                ids=parent.ids + [tok],
                logprob=float(flat[cand]),
                state=[st[hi] for st in states],
                finished=tok == EOS_ID,
            )
            if child.finished:
                child.state = None
                pool.append(child)
            else:
                next_live.append(child)
        live = next_live
    candidates = pool if pool else live
    if not candidates:
        raise RuntimeError("beam search produced no hypotheses")
    best = max(enumerate(candidates),
               key=lambda ih: (ih[1].score(length_normalize), -ih[0]))[1]
    best.state = None
    return best


# ---------------------------------------------------------------------------
# Corpus translation


def _greedy_decode_batch(models, src_id_lists) -> list[Hypothesis]:
    """Greedy decoding of several sentences in one padded pass."""
    _check_models(models)
    B = len(src_id_lists)
    src_ids, src_mask = model.pad_ids(src_id_lists, pad_value=EOS_ID)
    contexts = []
    for m in models:
        g = model._Graph(m)
        ann, uh, attn_mask, bwd_first = model._encode_graph(g, src_ids, src_mask)
        contexts.append((m, ann.value, uh.value, attn_mask,
                         model._init_state_graph(g, bwd_first).value))
    max_lens = np.array([default_max_len(len(s)) for s in src_id_lists])
    ids = [[] for _ in range(B)]
    logprobs = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    states = [c[4] for c in contexts]
    y_prev = np.full(B, -1, dtype=np.int64)
    for step in range(int(max_lens.max())):
        probs = None
        new_states = []
        for (m, ann, uh, attn_mask, _), st in zip(contexts, states):
            e_prev_val = np.zeros((B, m.dims.embed), dtype=m.dtype)
            known = y_prev >= 0
            if known.any():
                e_prev_val[known] = m.tgt_embed.value[y_prev[known]]
            s, _, logits = model._decoder_step_graph(
                model._Graph(m), nn.const(st), nn.const(e_prev_val),
                nn.const(ann), nn.const(uh), attn_mask,
                train_mode=False, rng=None, dropout_p=0.0)
            p = np.exp(nn.log_softmax(logits.value, axis=-1))
            probs = p if probs is None else probs + p
            new_states.append(s.value)
        probs = probs / len(models)
        toks = probs.argmax(axis=1)
        for i in range(B):
            if done[i] or step >= max_lens[i]:
                continue
            tok = int(toks[i])
            ids[i].append(tok)
            logprobs[i] += float(np.log(probs[i, tok]))
            if tok == EOS_ID:
                done[i] = True
        states = new_states
        y_prev = toks.astype(np.int64)
        if done.all():
            break
    return [Hypothesis(ids=ids[i], logprob=float(logprobs[i]), state=None,
                       finished=bool(done[i])) for i in range(B)]


def hypothesis_tokens(hyp: Hypothesis, tgt_vocab: corpus.Vocabulary) -> list[str]:
    ids = hyp.ids[:-1] if hyp.finished else hyp.ids
    return [tgt_vocab.token(i) for i in ids]


def translate_corpus(bundles, lines, mode, bpe_model: subword.BpeModel | None = None,
                     keep_subwords: bool = False, batch_size: int = 64):
    """Translate text lines end to end, preserving line alignment.

    `bundles` are loaded models sharing vocabularies; `mode` is "greedy" or
    ("beam", width).  Each line is tokenized, segmented, encoded, decoded
    and desegmented.  Failed lines become empty strings and are reported in
    the returned failure list as (line_index, message).
    """
    if not bundles:
        raise ValueError("need at least one model")
    src_vocab = bundles[0].src_vocab
    tgt_vocab = bundles[0].tgt_vocab
    for b in bundles[1:]:
        if b.tgt_vocab.tokens != tgt_vocab.tokens:
            raise ValueError("ensemble members must share the target vocabulary")
        if b.src_vocab.tokens != src_vocab.tokens:
            raise ValueError("ensemble members must share the source vocabulary")
    models = [b.params for b in bundles]
    out: list[str | None] = [None] * len(lines)
    failures: list[tuple[int, str]] = []

    encoded: list[tuple[int, list[int]]] = []
    for i, line in enumerate(lines):
        try:
            tokens = corpus.tokenize(line)
            if not tokens:
                out[i] = ""
                continue
            if bpe_model is not None:
                tokens = subword.segment_tokens(bpe_model, tokens)
            encoded.append((i, corpus.encode_sentence(src_vocab, tokens)))
        except Exception as e:  # record, keep the line slot
            out[i] = ""
            failures.append((i, str(e)))

    def emit(i: int, hyp: Hypothesis) -> None:
        units = hypothesis_tokens(hyp, tgt_vocab)
        if keep_subwords:
            out[i] = " ".join(units)
        else:
            marker = bpe_model.marker if bpe_model is not None else subword.DEFAULT_MARKER
            out[i] = " ".join(subword.desegment_tokens(units, marker))

    if mode == "greedy":
        order = sorted(range(len(encoded)), key=lambda j: len(encoded[j][1]))
        for start in range(0, len(order), batch_size):
            chunk = [encoded[j] for j in order[start:start + batch_size]]
            try:
                hyps = _greedy_decode_batch(models, [ids for _, ids in chunk])
                for (i, _), hyp in zip(chunk, hyps):
                    emit(i, hyp)
            except Exception:
                # fall back per line so one bad sentence cannot take out a batch
                for i, ids in chunk:
                    try:
                        emit(i, greedy_decode(models, ids))
                    except Exception as e:
                        out[i] = ""
                        failures.append((i, str(e)))
    elif isinstance(mode, tuple) and mode[0] == "beam":
        width = int(mode[1])
        for i, ids in encoded:
            try:
                emit(i, beam_search(models, ids, beam=width))
            except Exception as e:
                out[i] = ""
                failures.append((i, str(e)))
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return [x if x is not None else "" for x in out], failures
