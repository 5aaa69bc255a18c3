"""Attentional encoder-decoder.

Bidirectional GRU encoder producing one annotation vector per source
position (forward and backward states concatenated), a single-layer
feedforward alignment scorer, a GRU decoder conditioned on the previous
target embedding and the attention-weighted context vector, and a tanh
readout into the target softmax.

Forward passes are built on the nn tape so training, gradient checks and
decoding share one code path.  Batched inputs are padded; padded source
positions are masked out of the attention softmax and padded target
positions are masked out of the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .nn import GruParams, Node, Parameter

FREEZE_MONO_GROUPS = frozenset({"src-embed", "enc-fwd", "enc-bwd", "attention"})

NEG_INF = -1e9  # additive mask for padded attention positions


@dataclass
class Dims:
    embed: int
    hidden: int
    src_vocab: int
    tgt_vocab: int


@dataclass
class ModelParams:
    dims: Dims
    src_embed: Parameter
    tgt_embed: Parameter
    enc_fwd: GruParams
    enc_bwd: GruParams
    attn_w: Parameter   # prev decoder state -> alignment space
    attn_u: Parameter   # annotation -> alignment space
    attn_v: Parameter   # alignment space -> scalar score
    w_init: Parameter   # first backward encoder state -> initial decoder state
    dec: GruParams
    out_w1: Parameter
    out_b1: Parameter
    out_w2: Parameter
    out_b2: Parameter
    pinned_groups: frozenset = frozenset()  # stay frozen across origin switches

    def parameters(self) -> list[Parameter]:
        ps = [self.src_embed, self.tgt_embed]
        ps += self.enc_fwd.parameters()
        ps += self.enc_bwd.parameters()
        ps += [self.attn_w, self.attn_u, self.attn_v, self.w_init]
        ps += self.dec.parameters()
        ps += [self.out_w1, self.out_b1, self.out_w2, self.out_b2]
        return ps

    @property
    def dtype(self):
        return self.src_embed.value.dtype


def init_params(dims: Dims, rng: np.random.Generator, dtype=np.float64,
                init_scale: float = 0.08) -> ModelParams:
    """Orthogonal square recurrent matrices, uniform(-scale, scale)
    elsewhere, zero biases.

    The non-recurrent scale defaults to 0.08: with plain SGD at desk scale,
    a near-zero init (0.01) leaves the network in a dead region for
    thousands of updates.
    """
    e, h = dims.embed, dims.hidden
    u = lambda name, group, shape: Parameter(
        name, group, nn.uniform_init(rng, shape, scale=init_scale, dtype=dtype))
    z = lambda name, group, dim: Parameter(name, group, np.zeros(dim, dtype=dtype))
    return ModelParams(
        dims=dims,
        src_embed=u("src_embed", "src-embed", (dims.src_vocab, e)),
        tgt_embed=u("tgt_embed", "tgt-embed", (dims.tgt_vocab, e)),
        enc_fwd=nn.init_gru(rng, "enc_fwd", "enc-fwd", e, h, dtype=dtype,
                            scale=init_scale),
        enc_bwd=nn.init_gru(rng, "enc_bwd", "enc-bwd", e, h, dtype=dtype,
                            scale=init_scale),
        attn_w=u("attn_w", "attention", (h, h)),
        attn_u=u("attn_u", "attention", (2 * h, h)),
        attn_v=u("attn_v", "attention", (h, 1)),
        w_init=u("w_init", "dec", (h, h)),
        dec=nn.init_gru(rng, "dec", "dec", e + 2 * h, h, dtype=dtype,
                        scale=init_scale),
        out_w1=u("out_w1", "output", (h + e + 2 * h, e)),
        out_b1=z("out_b1", "output", e),
        out_w2=u("out_w2", "output", (e, dims.tgt_vocab)),
        out_b2=z("out_b2", "output", dims.tgt_vocab),
    )


@dataclass
class Annotations:
    """Per-position encoder outputs, one row per source token."""

    h: np.ndarray  # (m, 2*hidden)


@dataclass
class DecoderState:
    s: np.ndarray          # (hidden,)
    y_prev: int | None     # None means begin-of-sequence (zero embedding)
    step: int


# ---------------------------------------------------------------------------
# Graph construction


class _Graph:
    """Per-forward cache so each Parameter gets exactly one leaf node."""

    def __init__(self, params: ModelParams):
        self.params = params
        self._leaves: dict[int, Node] = {}

    def leaf(self, p: Parameter) -> Node:
        n = self._leaves.get(id(p))
        if n is None:
            n = nn.leaf(p)
            self._leaves[id(p)] = n
        return n


def _encode_graph(g: _Graph, src_ids: np.ndarray, src_mask: np.ndarray):
    """Run both encoder directions over a padded batch.

    Returns (annotation stack (B,m,2H), precomputed annotation projections
    (B,m,H), additive attention mask (B,m), first backward state (B,H)).
    """
    p = g.params
    B, m = src_ids.shape
    if m == 0:
        raise nn.DimensionError("cannot encode an empty source")
    dtype = p.dtype
    hidden = p.dims.hidden
    emb = [nn.rows(g.leaf(p.src_embed), src_ids[:, j]) for j in range(m)]
    all_real = bool(src_mask.all())
    masks = [None if all_real else src_mask[:, j:j + 1].astype(dtype) for j in range(m)]

    def run(direction: GruParams, order):
        h = nn.const(np.zeros((B, hidden), dtype=dtype))
        states = [None] * m
        for j in order:
            h = nn.gru_node(direction, g.leaf, emb[j], h, mask=masks[j])
            states[j] = h
        return states

    fwd = run(p.enc_fwd, range(m))
    bwd = run(p.enc_bwd, range(m - 1, -1, -1))
    ann = nn.stack([nn.concat([fwd[j], bwd[j]], axis=1) for j in range(m)], axis=1)
    uh = nn.matmul(ann, g.leaf(p.attn_u))  # (B, m, H)
    attn_mask = None if all_real else (1.0 - src_mask.astype(dtype)) * NEG_INF
    return ann, uh, attn_mask, bwd[0]


def _attend_graph(g: _Graph, s_prev: Node, ann: Node, uh: Node,
                  attn_mask: np.ndarray | None):
    """Fused alignment + context; alpha comes back as a plain array."""
    p = g.params
    if attn_mask is not None and not attn_mask.any():
        attn_mask = None
    return nn.attend_context(s_prev, ann, uh, g.leaf(p.attn_w),
                             g.leaf(p.attn_v), mask_add=attn_mask)


def _init_state_graph(g: _Graph, bwd_first: Node) -> Node:
    return nn.tanh(nn.matmul(bwd_first, g.leaf(g.params.w_init)))


def _decoder_step_graph(g: _Graph, s_prev: Node, e_prev: Node, ann: Node,
                        uh: Node, attn_mask: np.ndarray, train_mode: bool,
                        rng, dropout_p: float):
    p = g.params
    alpha, c = _attend_graph(g, s_prev, ann, uh, attn_mask)
    s = nn.gru_node(p.dec, g.leaf, nn.concat([e_prev, c], axis=1), s_prev)
    readout = nn.tanh(nn.affine(nn.concat([s, e_prev, c], axis=1),
                                g.leaf(p.out_w1), g.leaf(p.out_b1)))
    if train_mode and dropout_p > 0:
        keep = (rng.random(readout.value.shape) >= dropout_p).astype(p.dtype)
        readout = nn.mul(readout, nn.const(keep / (1.0 - dropout_p)))
    logits = nn.affine(readout, g.leaf(p.out_w2), g.leaf(p.out_b2))
    return s, alpha, logits


def batch_nll(params: ModelParams, src_ids, src_mask, tgt_ids, tgt_mask,
              train_mode=False, rng=None, dropout_p=0.0) -> tuple[Node, int]:
    """Teacher-forced summed cross-entropy over a padded batch.

    Returns (scalar loss node in nats, number of real target tokens).
    Call nn.backward on the node to populate gradients.
    """
    src_ids = np.asarray(src_ids)
    tgt_ids = np.asarray(tgt_ids)
    src_mask = np.asarray(src_mask, dtype=params.dtype)
    tgt_mask = np.asarray(tgt_mask, dtype=params.dtype)
    g = _Graph(params)
    B, n = tgt_ids.shape
    ann, uh, attn_mask, bwd_first = _encode_graph(g, src_ids, src_mask)
    s = _init_state_graph(g, bwd_first)
    total = None
    for i in range(n):
        if i == 0:
            e_prev = nn.const(np.zeros((B, params.dims.embed), dtype=params.dtype))
        else:
            e_prev = nn.rows(g.leaf(params.tgt_embed), tgt_ids[:, i - 1])
        s, _, logits = _decoder_step_graph(g, s, e_prev, ann, uh, attn_mask,
                                           train_mode, rng, dropout_p)
        nll = nn.ce_from_logits(logits, tgt_ids[:, i])
        term = nn.sum_all(nn.mul(nll, nn.const(tgt_mask[:, i])))
        total = term if total is None else nn.add(total, term)
    return total, int(tgt_mask.sum())


# ---------------------------------------------------------------------------
# Single-sentence views used by decoding, evaluation and tests


def encode(params: ModelParams, src_ids) -> Annotations:
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise nn.DimensionError("cannot encode an empty source")
    if src_ids.max() >= params.dims.src_vocab or src_ids.min() < 0:
        raise IndexError("source id out of vocabulary range")
    g = _Graph(params)
    mask = np.ones((1, src_ids.size))
    ann, _, _, _ = _encode_graph(g, src_ids[None, :], mask)
    return Annotations(h=ann.value[0])


def attend(params: ModelParams, s_prev: np.ndarray, ann: Annotations):
    """Alignment weights and context vector for one decoder step."""
    g = _Graph(params)
    ann_node = nn.const(ann.h[None, :, :])
    uh = nn.matmul(ann_node, g.leaf(params.attn_u))
    alpha, c = _attend_graph(g, nn.const(np.asarray(s_prev)[None, :]), ann_node,
                             uh, None)
    return alpha[0], c.value[0]


def init_decoder_state(params: ModelParams, ann: Annotations) -> DecoderState:
    """s_0 = tanh(first backward encoder state projected by w_init)."""
    h = params.dims.hidden
    bwd_first = ann.h[0, h:]
    s0 = np.tanh(bwd_first @ params.w_init.value)
    return DecoderState(s=s0, y_prev=None, step=0)


def decode_step(params: ModelParams, state: DecoderState, ann: Annotations,
                train_mode: bool = False, rng=None, dropout_p: float = 0.0):
    """One decoder step; returns (next state, distribution over target ids)."""
    g = _Graph(params)
    m = ann.h.shape[0]
    ann_node = nn.const(ann.h[None, :, :])
    uh = nn.matmul(ann_node, g.leaf(params.attn_u))
    if state.y_prev is None:
        e_prev = nn.const(np.zeros((1, params.dims.embed), dtype=params.dtype))
    else:
        e_prev = nn.rows(g.leaf(params.tgt_embed), np.array([state.y_prev]))
    s, _, logits = _decoder_step_graph(g, nn.const(state.s[None, :]), e_prev,
                                       ann_node, uh, None,
                                       train_mode, rng, dropout_p)
    probs = nn.softmax(logits.value[0])
    return DecoderState(s=s.value[0], y_prev=state.y_prev, step=state.step + 1), probs


def sequence_nll(params: ModelParams, src_ids, tgt_ids, train_mode=False,
                 rng=None, dropout_p: float = 0.0) -> tuple[float, int]:
    """Teacher-forced loss for one encoded pair (both sides end in <eos>)."""
    src_ids = np.asarray(src_ids)
    tgt_ids = np.asarray(tgt_ids)
    node, count = batch_nll(params, src_ids[None, :], np.ones((1, src_ids.size)),
                            tgt_ids[None, :], np.ones((1, tgt_ids.size)),
                            train_mode=train_mode, rng=rng, dropout_p=dropout_p)
    return float(node.value), count


def corpus_nll(params: ModelParams, pairs, batch_size: int = 64) -> tuple[float, int]:
    """Summed teacher-forced loss in nats over encoded (src, tgt) id pairs."""
    total = 0.0
    tokens = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        src_ids, src_mask = pad_ids([s for s, _ in chunk])
        tgt_ids, tgt_mask = pad_ids([t for _, t in chunk])
        node, count = batch_nll(params, src_ids, src_mask, tgt_ids, tgt_mask)
        total += float(node.value)
        tokens += count
    return total, tokens


def pad_ids(seqs: list, pad_value: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pad ragged id lists into (B, max_len) ids plus a {0,1} mask."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_value, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def freeze_for_origin(params: ModelParams, origin: str) -> None:
    """Freeze encoder and attention groups for dummy-source minibatches;
    everything else (parallel, synthetic) trains all groups.  Groups in
    params.pinned_groups stay frozen regardless."""
    if origin not in ("parallel", "mono-dummy", "synthetic"):
        raise ValueError(f"unknown origin {origin!r}")
    mono = origin == "mono-dummy"
    for p in params.parameters():
        p.frozen = (p.group in params.pinned_groups) or (mono and p.group in FREEZE_MONO_GROUPS)


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy with fresh gradient buffers."""
    import copy

    new = copy.deepcopy(params)
    for p in new.parameters():
        p.grad = np.zeros_like(p.value)
    return new


# ---------------------------------------------------------------------------
# Bundles: parameters plus the vocabularies they were trained with, which is
# everything needed to decode.  Serialized through the nn checkpoint format
# with dims and vocab tokens in the manifest.


@dataclass
class ModelBundle:
    params: ModelParams
    src_vocab: object  # corpus.Vocabulary
    tgt_vocab: object  # corpus.Vocabulary


def _rebuild(dims: Dims, plist: list[Parameter]) -> ModelParams:
    by_name = {p.name: p for p in plist}

    def gru(prefix: str) -> GruParams:
        return GruParams(**{k: by_name[f"{prefix}.{k}"]
                            for k in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")})

    return ModelParams(
        dims=dims,
        src_embed=by_name["src_embed"],
        tgt_embed=by_name["tgt_embed"],
        enc_fwd=gru("enc_fwd"),
        enc_bwd=gru("enc_bwd"),
        attn_w=by_name["attn_w"],
        attn_u=by_name["attn_u"],
        attn_v=by_name["attn_v"],
        w_init=by_name["w_init"],
        dec=gru("dec"),
        out_w1=by_name["out_w1"],
        out_b1=by_name["out_b1"],
        out_w2=by_name["out_w2"],
        out_b2=by_name["out_b2"],
    )


def save_bundle(path, bundle: ModelBundle, extra: dict | None = None) -> None:
    info = {
        "dims": {"embed": bundle.params.dims.embed,
                 "hidden": bundle.params.dims.hidden,
                 "src_vocab": bundle.params.dims.src_vocab,
                 "tgt_vocab": bundle.params.dims.tgt_vocab},
        "src_vocab_tokens": bundle.src_vocab.tokens,
        "tgt_vocab_tokens": bundle.tgt_vocab.tokens,
    }
    if extra:
        info.update(extra)
    # unfreeze flags are transient training state, not model identity
    plist = bundle.params.parameters()
    flags = [p.frozen for p in plist]
    for p in plist:
        p.frozen = False
    try:
        nn.save_params(path, plist, extra=info)
    finally:
        for p, f in zip(plist, flags):
            p.frozen = f


def load_bundle(path) -> tuple[ModelBundle, dict]:
    from . import corpus

    plist, manifest = nn.load_params(path)
    dims = Dims(**manifest["dims"])
    params = _rebuild(dims, plist)
    bundle = ModelBundle(
        params=params,
        src_vocab=corpus.Vocabulary(manifest["src_vocab_tokens"]),
        tgt_vocab=corpus.Vocabulary(manifest["tgt_vocab_tokens"]),
    )
    return bundle, manifest
