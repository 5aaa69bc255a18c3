import math

import numpy as np
import pytest

from btx import corpus, model, nn
from btx.model import Dims, freeze_for_origin, init_params


def small_params(seed=0, embed=5, hidden=4, src_vocab=9, tgt_vocab=8, spread=0.3):
    rng = nn.make_rng(seed, "test-model")
    params = init_params(Dims(embed, hidden, src_vocab, tgt_vocab), rng)
    if spread:
        for p in params.parameters():
            p.value += rng.normal(0, spread, p.value.shape)
    return params


# ---------------------------------------------------------------------------
# encoder


def test_encode_single_token():
    params = small_params()
    ann = model.encode(params, [3])
    assert ann.h.shape == (1, 2 * params.dims.hidden)


def test_encode_rejects_empty():
    params = small_params()
    with pytest.raises(nn.DimensionError):
        model.encode(params, [])


def test_encode_zero_params_gives_zero_annotations():
    params = small_params(spread=0.0)
    for p in params.parameters():
        p.value[:] = 0.0
    ann = model.encode(params, [1, 2, 3])
    assert np.allclose(ann.h, 0.0)


def test_encode_reversal_swaps_direction_halves():
    params = small_params()
    h = params.dims.hidden
    # make both directions share weights so reversal is an exact symmetry
    for a, b in zip(params.enc_fwd.parameters(), params.enc_bwd.parameters()):
        b.value[:] = a.value
    ids = [3, 5, 2, 7]
    fwd = model.encode(params, ids).h
    rev = model.encode(params, ids[::-1]).h
    assert np.allclose(fwd[:, :h], rev[::-1, h:], atol=1e-12)
    assert np.allclose(fwd[:, h:], rev[::-1, :h], atol=1e-12)


# ---------------------------------------------------------------------------
# attention


def test_attend_single_position_is_certain():
    params = small_params()
    ann = model.encode(params, [4])
    alpha, c = model.attend(params, np.zeros(params.dims.hidden), ann)
    assert np.allclose(alpha, [1.0])
    assert np.allclose(c, ann.h[0])


def test_attend_zero_scorer_is_uniform():
    params = small_params()
    params.attn_v.value[:] = 0.0
    ann = model.encode(params, [1, 2, 3, 4])
    alpha, c = model.attend(params, np.zeros(params.dims.hidden), ann)
    assert np.allclose(alpha, 0.25)
    assert np.allclose(c, ann.h.mean(axis=0), atol=1e-12)


def test_context_is_weighted_sum():
    params = small_params()
    ann = model.encode(params, [1, 2, 3])
    alpha, c = model.attend(params, np.ones(params.dims.hidden) * 0.3, ann)
    assert math.isclose(alpha.sum(), 1.0, abs_tol=1e-12)
    assert np.allclose(c, alpha @ ann.h, atol=1e-12)


# ---------------------------------------------------------------------------
# decoder


def test_decode_step_outputs_distribution():
    params = small_params()
    ann = model.encode(params, [2, 3, 4])
    state = model.init_decoder_state(params, ann)
    state, probs = model.decode_step(params, state, ann)
    assert probs.shape == (params.dims.tgt_vocab,)
    assert abs(probs.sum() - 1.0) <= 1e-12
    assert np.all(probs > 0)


def test_decode_step_inference_ignores_rng():
    params = small_params()
    ann = model.encode(params, [2, 3])
    state = model.init_decoder_state(params, ann)
    _, p1 = model.decode_step(params, state, ann, train_mode=False,
                              rng=nn.make_rng(1, "a"), dropout_p=0.5)
    _, p2 = model.decode_step(params, state, ann, train_mode=False,
                              rng=nn.make_rng(2, "b"), dropout_p=0.5)
    assert np.array_equal(p1, p2)


def test_initial_state_projects_first_backward_annotation():
    params = small_params()
    ann = model.encode(params, [5, 1, 2])
    state = model.init_decoder_state(params, ann)
    h = params.dims.hidden
    expected = np.tanh(ann.h[0, h:] @ params.w_init.value)
    assert np.allclose(state.s, expected, atol=1e-12)
    assert state.y_prev is None and state.step == 0


def test_decoder_first_step_uses_zero_embedding():
    params = small_params()
    ann = model.encode(params, [5, 1])
    state = model.init_decoder_state(params, ann)
    # y_prev=None must behave exactly like an all-zero previous embedding
    params.tgt_embed.value[0, :] = 0.0
    state_zero = model.DecoderState(s=state.s, y_prev=0, step=0)
    _, p_none = model.decode_step(params, state, ann)
    _, p_zero = model.decode_step(params, state_zero, ann)
    assert np.allclose(p_none, p_zero, atol=1e-12)


# ---------------------------------------------------------------------------
# sequence loss


def test_sequence_nll_uniform_model():
    params = small_params(spread=0.0)
    for p in params.parameters():
        p.value[:] = 0.0  # logits all zero -> uniform distribution
    tgt = [3, 2, corpus.EOS_ID]
    loss, count = model.sequence_nll(params, [1, corpus.EOS_ID], tgt)
    assert count == 3
    assert math.isclose(loss, len(tgt) * math.log(params.dims.tgt_vocab),
                        rel_tol=1e-12)


def test_sequence_nll_batch_consistency():
    params = small_params()
    pairs = [([3, 1], [2, 5, 1]), ([4, 2, 1], [6, 1])]
    total = sum(model.sequence_nll(params, s, t)[0] for s, t in pairs)
    batched, tokens = model.corpus_nll(params, pairs, batch_size=2)
    assert math.isclose(total, batched, rel_tol=1e-10)
    assert tokens == 5


def test_loss_decreases_when_overfitting_single_pair():
    params = small_params(spread=0.1)
    src, tgt = [3, 4, 1], [2, 6, 5, 1]
    first, _ = model.sequence_nll(params, src, tgt)
    plist = params.parameters()
    for _ in range(50):
        node, _ = model.batch_nll(params, np.array([src]), np.ones((1, 3)),
                                  np.array([tgt]), np.ones((1, 4)))
        nn.backward(node)
        nn.sgd_step(plist, 0.5)
    last, _ = model.sequence_nll(params, src, tgt)
    assert last < first * 0.5


def test_gradients_match_finite_differences_small_model():
    params = small_params(seed=3)
    src = np.array([[3, 5, 1]])
    tgt = np.array([[2, 6, 1]])
    node, _ = model.batch_nll(params, src, np.ones((1, 3)), tgt, np.ones((1, 3)))
    nn.backward(node)

    def loss_at():
        n, _ = model.batch_nll(params, src, np.ones((1, 3)), tgt, np.ones((1, 3)))
        return float(n.value)

    h = 1e-5
    rng = nn.make_rng(0, "fd-pick")
    for p in params.parameters():
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        idxs = range(flat.size) if flat.size <= 12 else \
            rng.choice(flat.size, 12, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - grad[i])
            assert err < 1e-8 or err / max(abs(fd), abs(grad[i])) < 1e-4


# ---------------------------------------------------------------------------
# freezing


def test_freeze_for_origin_mono_freezes_four_groups():
    params = small_params()
    freeze_for_origin(params, "mono-dummy")
    frozen_groups = {p.group for p in params.parameters() if p.frozen}
    assert frozen_groups == {"src-embed", "enc-fwd", "enc-bwd", "attention"}


@pytest.mark.parametrize("origin", ["synthetic", "parallel"])
def test_freeze_for_origin_other_origins_freeze_nothing(origin):
    params = small_params()
    freeze_for_origin(params, "mono-dummy")
    freeze_for_origin(params, origin)
    assert not any(p.frozen for p in params.parameters())


def test_freeze_for_origin_rejects_unknown():
    with pytest.raises(ValueError):
        freeze_for_origin(small_params(), "other")


def test_pinned_groups_survive_origin_switches():
    params = small_params()
    params.pinned_groups = frozenset({"src-embed", "tgt-embed"})
    freeze_for_origin(params, "parallel")
    assert params.src_embed.frozen and params.tgt_embed.frozen
    assert not params.attn_w.frozen


def test_mono_minibatch_update_preserves_frozen_groups():
    params = small_params()
    plist = params.parameters()
    freeze_for_origin(params, "mono-dummy")
    before = {p.name: p.value.tobytes() for p in plist}
    src = np.array([[corpus.NULL_ID, corpus.EOS_ID]])
    tgt = np.array([[3, 4, corpus.EOS_ID]])
    node, _ = model.batch_nll(params, src, np.ones((1, 2)), tgt, np.ones((1, 3)))
    nn.backward(node)
    nn.clip_gradients(plist, 1.0)
    nn.sgd_step(plist, 0.5)
    frozen = {"src-embed", "enc-fwd", "enc-bwd", "attention"}
    changed = [p.name for p in plist if p.value.tobytes() != before[p.name]]
    for p in plist:
        if p.group in frozen:
            assert p.value.tobytes() == before[p.name], p.name
    assert any(p.group in ("dec", "output", "tgt-embed")
               for p in plist if p.name in changed)


# ---------------------------------------------------------------------------
# invariants


def test_alpha_sums_to_one_every_step():
    params = small_params(seed=5)
    ann = model.encode(params, [1, 4, 6, 2])
    state = model.init_decoder_state(params, ann)
    for tok in [3, 5, 2]:
        alpha, _ = model.attend(params, state.s, ann)
        assert abs(alpha.sum() - 1.0) <= 1e-12
        state, probs = model.decode_step(params, state, ann)
        state = model.DecoderState(state.s, tok, state.step)
        assert np.all(probs > 0)


def test_forward_outputs_finite():
    params = small_params(seed=6, spread=2.0)  # exaggerated weights
    ann = model.encode(params, [1, 2, 3, 4, 5])
    assert np.all(np.isfinite(ann.h))
    state = model.init_decoder_state(params, ann)
    state, probs = model.decode_step(params, state, ann)
    assert np.all(np.isfinite(probs))
    loss, _ = model.sequence_nll(params, [1, 2, 1], [3, 1])
    assert math.isfinite(loss)


def test_bundle_checkpoint_roundtrip_bit_identical(tmp_path):
    params = small_params(seed=8)
    vocab_tokens = list(corpus.RESERVED) + [f"w{i}" for i in range(6)]
    src_vocab = corpus.Vocabulary(vocab_tokens[:params.dims.src_vocab])
    tgt_vocab = corpus.Vocabulary(vocab_tokens[:params.dims.tgt_vocab])
    bundle = model.ModelBundle(params, src_vocab, tgt_vocab)
    path = tmp_path / "m.btx"
    model.save_bundle(path, bundle, extra={"update": 17})
    loaded, manifest = model.load_bundle(path)
    assert manifest["update"] == 17
    assert loaded.src_vocab.tokens == src_vocab.tokens
    for a, b in zip(params.parameters(), loaded.params.parameters()):
        assert a.value.tobytes() == b.value.tobytes()
    # forward outputs reproduce bit-identically
    ann_a = model.encode(params, [1, 3, 2])
    ann_b = model.encode(loaded.params, [1, 3, 2])
    assert ann_a.h.tobytes() == ann_b.h.tobytes()
