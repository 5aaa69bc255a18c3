import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btx import corpus
from btx.corpus import (EOS_ID, NULL, UNK_ID, DataError, MixedDataset,
                        SentencePair, Vocabulary, build_vocabulary,
                        encode_sentence, epoch_stream, filter_pairs,
                        make_minibatches, mono_pair)


def pair(src, tgt, origin="parallel"):
    return SentencePair(tuple(src), tuple(tgt), origin)


# ---------------------------------------------------------------------------
# tokenization / filtering


def test_tokenize_detaches_punctuation():
    assert corpus.tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    assert corpus.tokenize("a  b") == ["a", "b"]
    assert corpus.tokenize("") == []


def test_filter_drops_extreme_ratio():
    pairs = [pair(["a"], ["b"] * 10)]
    assert filter_pairs(pairs, 9.0) == []


def test_filter_keeps_ratio_one_and_exact_boundary():
    keep = pair(["a"], ["b"])
    boundary = pair(["a"], ["b"] * 9)  # ratio exactly 9 stays
    assert filter_pairs([keep, boundary], 9.0) == [keep, boundary]


def test_filter_drops_empty_sides():
    assert filter_pairs([pair([], ["b"])], 9.0) == []
    assert filter_pairs([pair(["a"], [])], 9.0) == []
    assert filter_pairs([], 9.0) == []


def test_filter_rejects_bad_ratio():
    with pytest.raises(ValueError):
        filter_pairs([], 0.0)


token_lists = st.lists(st.sampled_from(["a", "b", "c"]), max_size=12)


@given(st.lists(st.tuples(token_lists, token_lists), max_size=20),
       st.floats(min_value=1.0, max_value=20.0))
def test_filter_idempotent_and_order_preserving(raw, max_ratio):
    pairs = [pair(s, t) for s, t in raw]
    once = filter_pairs(pairs, max_ratio)
    assert filter_pairs(once, max_ratio) == once
    it = iter(pairs)
    for kept in once:  # relative order preserved
        for candidate in it:
            if candidate == kept:
                break
        else:
            pytest.fail("order not preserved")


# ---------------------------------------------------------------------------
# vocabulary


def test_vocab_frequency_order():
    vocab = build_vocabulary([["a", "a", "b"]], 10)
    assert "a" in vocab and "b" in vocab
    assert vocab.lookup("a") < vocab.lookup("b")
    assert vocab.tokens[:3] == list(corpus.RESERVED)


def test_vocab_capacity_exhausted_by_reserved():
    vocab = build_vocabulary([["x"]], 3)
    assert len(vocab) == 3
    assert vocab.lookup("x") == UNK_ID


def test_vocab_accepts_full_scale_size():
    vocab = build_vocabulary([["a"]], 90000)
    assert len(vocab) == 4


def test_vocab_tie_broken_by_first_occurrence():
    vocab = build_vocabulary([["z", "m", "z", "m", "q"]], 10)
    assert vocab.lookup("z") < vocab.lookup("m") < vocab.lookup("q")


def test_vocab_empty_corpus_errors():
    with pytest.raises(DataError):
        build_vocabulary([], 10)
    with pytest.raises(ValueError):
        build_vocabulary([["a"]], 2)


def test_vocab_dense_ids_and_roundtrip(tmp_path):
    vocab = build_vocabulary([["b", "a", "b"]], 10)
    for i, tok in enumerate(vocab.tokens):
        assert vocab.index[tok] == i
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert path.read_text(encoding="utf-8").splitlines() == vocab.tokens
    assert Vocabulary.load(path).tokens == vocab.tokens


def test_vocab_requires_reserved_prefix():
    with pytest.raises(ValueError):
        Vocabulary(["a", "b", "c"])


def test_encode_appends_eos():
    vocab = build_vocabulary([["a"]], 10)
    assert encode_sentence(vocab, ["a"]) == [vocab.lookup("a"), EOS_ID]
    assert encode_sentence(vocab, []) == [EOS_ID]
    assert encode_sentence(vocab, ["zzz"]) == [UNK_ID, EOS_ID]


@given(st.lists(st.sampled_from(["a", "b", "zzz", "<null>"]), max_size=10))
def test_encode_ids_always_in_range(tokens):
    vocab = build_vocabulary([["a", "b"]], 5)
    ids = encode_sentence(vocab, tokens)
    assert all(0 <= i < len(vocab) for i in ids)
    assert ids[-1] == EOS_ID


# ---------------------------------------------------------------------------
# sentence pairs


def test_mono_pair_has_null_source():
    p = mono_pair(["w1", "w2"])
    assert p.source == (NULL,)
    assert p.origin == corpus.ORIGIN_MONO


def test_mono_origin_requires_null_source():
    with pytest.raises(ValueError):
        SentencePair(("a",), ("b",), corpus.ORIGIN_MONO)
    with pytest.raises(ValueError):
        SentencePair(("a",), ("b",), "bogus")


# ---------------------------------------------------------------------------
# epoch streams


def toy_dataset(n_parallel=100, n_mono=50, ratio=1.0, seed=3):
    parallel = [pair([f"s{i}"], [f"t{i}"]) for i in range(n_parallel)]
    mono = [(f"m{i}",) for i in range(n_mono)]
    return MixedDataset(parallel=parallel, mono_pool=mono, ratio=ratio, seed=seed)


def test_epoch_one_to_one_ratio_counts():
    ds = toy_dataset(n_parallel=100, ratio=1.0)
    stream = epoch_stream(ds, 0)
    assert len(stream) == 200
    origins = [p.origin for p in stream]
    assert origins.count("parallel") == 100
    assert origins.count("mono-dummy") == 100


def test_epoch_ratio_zero_is_parallel_shuffle():
    ds = toy_dataset(ratio=0.0)
    stream = epoch_stream(ds, 0)
    assert sorted(stream, key=lambda p: p.source) == sorted(
        ds.parallel, key=lambda p: p.source)
    assert stream != ds.parallel  # shuffled with overwhelming probability


def test_epoch_deterministic_per_seed_and_epoch():
    ds = toy_dataset()
    assert epoch_stream(ds, 4) == epoch_stream(ds, 4)
    assert epoch_stream(ds, 4) != epoch_stream(ds, 5)


def test_epoch_resamples_mono_each_epoch():
    ds = toy_dataset(n_parallel=20, n_mono=1000)
    mono0 = sorted(p.target for p in epoch_stream(ds, 0) if p.origin == "mono-dummy")
    mono1 = sorted(p.target for p in epoch_stream(ds, 1) if p.origin == "mono-dummy")
    assert mono0 != mono1


def test_epoch_requires_mono_pool_when_ratio_positive():
    ds = MixedDataset(parallel=[pair(["a"], ["b"])], mono_pool=[], ratio=1.0, seed=0)
    with pytest.raises(DataError):
        epoch_stream(ds, 0)


def test_epoch_ratio_rounding():
    ds = toy_dataset(n_parallel=10, ratio=0.25)
    count = sum(1 for p in epoch_stream(ds, 0) if p.origin == "mono-dummy")
    assert count == round(0.25 * 10)


@given(st.integers(min_value=1, max_value=40), st.floats(min_value=0, max_value=3),
       st.integers(min_value=0, max_value=4))
@settings(max_examples=40, deadline=None)
def test_epoch_parallel_count_exact(n_parallel, ratio, epoch):
    ds = toy_dataset(n_parallel=n_parallel, n_mono=30, ratio=ratio)
    stream = epoch_stream(ds, epoch)
    assert sum(1 for p in stream if p.origin == "parallel") == n_parallel
    assert sum(1 for p in stream if p.origin == "mono-dummy") == round(ratio * n_parallel)


def test_epoch_synthetic_cap_resamples_without_replacement():
    synth = [pair([f"x{i}"], [f"y{i}"], "synthetic") for i in range(10)]
    ds = MixedDataset(parallel=[pair(["a"], ["b"])] * 5, mono_pool=[], ratio=0.0,
                      seed=1, synthetic_pool=synth, synthetic_cap=4)
    stream = epoch_stream(ds, 0)
    chosen = [p for p in stream if p.origin == "synthetic"]
    assert len(chosen) == 4
    assert len(set(chosen)) == 4


# ---------------------------------------------------------------------------
# minibatches


def test_minibatch_window_sorting():
    stream = [pair(["s"], ["t"] * ((i * 7) % 13 + 1)) for i in range(40)]
    batches = make_minibatches(stream, batch_size=2, sort_window=20)
    assert len(batches) == 20
    lengths = [len(e.target) for b in batches for e in b.examples]
    assert lengths == sorted(lengths)  # single window here


def test_minibatch_batch_size_one():
    stream = [pair(["s"], ["t"] * (3 - i)) for i in range(3)]
    batches = make_minibatches(stream, batch_size=1, sort_window=20)
    assert [len(b) for b in batches] == [1, 1, 1]
    assert [len(b.examples[0].target) for b in batches] == [1, 2, 3]


def test_minibatch_segregates_dummy_source():
    window = [mono_pair(["m1"]), pair(["p"], ["q"]), mono_pair(["m2"]),
              pair(["r"], ["s"])]
    batches = make_minibatches(window, batch_size=2, sort_window=1)
    # sort_window=1, batch 2 -> windows of 2; each window splits by origin
    for b in batches:
        origins = {e.origin for e in b.examples}
        assert len(origins) == 1


def test_minibatch_never_mixes_origins():
    rng = np.random.default_rng(0)
    stream = []
    for i in range(200):
        if rng.random() < 0.5:
            stream.append(mono_pair([f"m{i}"]))
        else:
            stream.append(pair([f"s{i}"], [f"t{i}"] ))
    batches = make_minibatches(stream, batch_size=8, sort_window=5)
    for b in batches:
        is_mono = [e.origin == "mono-dummy" for e in b.examples]
        assert all(is_mono) or not any(is_mono)
    assert sum(len(b) for b in batches) == 200


def test_minibatch_validation():
    with pytest.raises(ValueError):
        make_minibatches([], 0, 1)
    with pytest.raises(ValueError):
        make_minibatches([], 1, 0)


def test_pad_encode_shapes_and_masks():
    vocab = build_vocabulary([["a", "b", "c"]], 10)
    mb = corpus.Minibatch([pair(["a"], ["b", "c"]), pair(["a", "b"], ["c"])])
    src_ids, src_mask, tgt_ids, tgt_mask = corpus.pad_encode(mb, vocab, vocab)
    assert src_ids.shape == (2, 3)
    assert tgt_ids.shape == (2, 3)
    assert src_mask.tolist() == [[1, 1, 0], [1, 1, 1]]
    assert tgt_mask.tolist() == [[1, 1, 1], [1, 1, 0]]
    assert src_ids[0, 1] == EOS_ID


# ---------------------------------------------------------------------------
# file I/O


def test_load_parallel_checks_line_counts(tmp_path):
    (tmp_path / "a.txt").write_text("x\ny\n", encoding="utf-8")
    (tmp_path / "b.txt").write_text("u\n", encoding="utf-8")
    with pytest.raises(DataError):
        corpus.load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")


def test_load_parallel_roundtrip(tmp_path):
    (tmp_path / "a.txt").write_text("x1 x2\ny\n", encoding="utf-8")
    (tmp_path / "b.txt").write_text("u\nv1 v2\n", encoding="utf-8")
    pairs = corpus.load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")
    assert pairs[0] == pair(["x1", "x2"], ["u"])
    assert pairs[1] == pair(["y"], ["v1", "v2"])
