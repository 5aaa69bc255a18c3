import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btx import corpus, evaluation, model, nn
from btx.corpus import DataError


def oracle_bleu(hyps, refs, max_n=4):
    """Independent corpus BLEU: plain-dict clipped n-gram counting."""
    match = {n: 0 for n in range(1, max_n + 1)}
    total = {n: 0 for n in range(1, max_n + 1)}
    hlen = rlen = 0
    for h, r in zip(hyps, refs):
        hw, rw = h.split(), r.split()
        hlen += len(hw)
        rlen += len(rw)
        for n in range(1, max_n + 1):
            rcounts = {}
            for i in range(len(rw) - n + 1):
                g = tuple(rw[i:i + n])
                rcounts[g] = rcounts.get(g, 0) + 1
            hcounts = {}
            for i in range(len(hw) - n + 1):
                g = tuple(hw[i:i + n])
                hcounts[g] = hcounts.get(g, 0) + 1
            for g, c in hcounts.items():
                total[n] += c
                match[n] += min(c, rcounts.get(g, 0))
    ps = [match[n] / total[n] if total[n] else 0.0 for n in range(1, max_n + 1)]
    bp = 1.0 if hlen >= rlen else math.exp(1 - rlen / hlen)
    if any(p == 0 for p in ps):
        return 0.0
    return 100.0 * bp * math.exp(sum(math.log(p) for p in ps) / max_n)


# Twenty fixed cases.  Expected values were produced by the oracle above and
# the analytic ones verified by hand: #1 is 100*e^-1 (all precisions 1, BP =
# exp(1-8/4)); #4 is 100*(0.8*0.75*(2/3)*0.5)^(1/4); #7 and #12 are pure
# brevity-penalty cases exp(-1/2) and exp(-2/5).
BLEU_FIXTURES = [
    (["a b c d"], ["a b c d e f g h"], 36.787944),
    (["the cat sat on the mat"], ["the cat sat on the mat"], 100.0),
    (["x y z w", "p q r s t"], ["x y z w", "p q r s t"], 100.0),
    (["a b c d e"], ["a b c d"], 66.874030),
    (["a b c d"], ["a x c y"], 0.0),
    (["the the the the"], ["the cat sat down"], 0.0),
    (["b c d e"], ["a b c d e f"], 60.653066),
    (["a b c d e", "f g h i j"], ["a b c d e", "f g x i j"], 64.093051),
    (["c d a b e f g"], ["a b c d e f g"], 0.0),
    (["a a b c d"], ["a a b c d"], 100.0),
    (["a b c d", "e f g h i"], ["a b c d", "x y z w v"], 39.920398),
    (["a b c d e"], ["a b c d e f g"], 67.032005),
    (["a b c e d f g h"], ["a b c d e f g h"], 0.0),
    (["a b c d e f g h"], ["a b c d"], 34.572078),
    (["the cat , the dog ."], ["the cat , the dog ."], 100.0),
    (["The cat sat on a mat"], ["the cat sat on a mat"], 75.983569),
    (["x x x d e f g h"], ["a b c d e f g h"], 51.697315),
    (["a X c X e X g X"], ["a b c d e f g h"], 0.0),
    (["w1 w2 w3 w4 w5 w6 w7 w8 w9", "u1 u2 u3 u4 u5"],
     ["w1 w2 w3 w4 w5 w6 w7 w8 w9", "u1 u2 u3 u4 u6"], 90.483487),
    (["yes", "no", "maybe"], ["yes", "no", "definitely"], 0.0),
]


@pytest.mark.parametrize("hyp,ref,expected", BLEU_FIXTURES)
def test_bleu_fixtures(hyp, ref, expected):
    report = evaluation.bleu(hyp, ref)
    assert report.bleu == pytest.approx(expected, abs=1e-4)
    assert oracle_bleu(hyp, ref) == pytest.approx(expected, abs=1e-4)


def test_bleu_brevity_penalty_report_fields():
    report = evaluation.bleu(["a b c d"], ["a b c d e f g h"])
    assert report.precisions == [1.0, 1.0, 1.0, 1.0]
    assert report.brevity_penalty == pytest.approx(math.exp(-1.0))
    assert report.hyp_len == 4 and report.ref_len == 8


def test_bleu_identity_is_100():
    lines = ["some longer sentence with enough tokens here"] * 3
    assert evaluation.bleu(lines, lines).bleu == 100.0


def test_bleu_case_flag():
    hyp, ref = ["The Cat sat down here"], ["the cat sat down here"]
    assert evaluation.bleu(hyp, ref, case_sensitive=False).bleu == 100.0
    assert evaluation.bleu(hyp, ref, case_sensitive=True).bleu < 100.0


def test_bleu_rejects_mismatch_and_empty():
    with pytest.raises(DataError):
        evaluation.bleu(["a"], ["a", "b"])
    with pytest.raises(DataError):
        evaluation.bleu([], [])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 30))
def test_bleu_permutation_invariant(perm_seed):
    hyps = ["a b c d e", "f g h i", "a b x y z w", "q r s t u v"]
    refs = ["a b c d f", "f g h j", "a b x y w z", "q r s u t v"]
    base = evaluation.bleu(hyps, refs).bleu
    order = list(np.random.default_rng(perm_seed).permutation(len(hyps)))
    shuffled = evaluation.bleu([hyps[i] for i in order],
                               [refs[i] for i in order]).bleu
    assert shuffled == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# cross-entropy


def uniform_bundle(tgt_vocab):
    params = model.init_params(model.Dims(2, 2, 4, tgt_vocab), nn.make_rng(0, "u"))
    for p in params.parameters():
        p.value[:] = 0.0  # all-zero logits = uniform output distribution
    tokens = list(corpus.RESERVED) + [f"w{i}" for i in range(tgt_vocab - 3)]
    src_vocab = corpus.Vocabulary(tokens[:4])
    return model.ModelBundle(params, src_vocab, corpus.Vocabulary(tokens))


def test_cross_entropy_uniform_model_exact_bits():
    bundle = uniform_bundle(1024)
    ce = evaluation.corpus_cross_entropy(bundle, [(("w0",), ("w1", "w2"))])
    assert ce == pytest.approx(10.0, abs=1e-12)  # log2(1024)


def test_cross_entropy_matches_sequence_nll():
    rng = nn.make_rng(3, "ce")
    params = model.init_params(model.Dims(4, 3, 8, 8), rng)
    for p in params.parameters():
        p.value += rng.normal(0, 0.3, p.value.shape)
    tokens = list(corpus.RESERVED) + [f"w{i}" for i in range(5)]
    vocab = corpus.Vocabulary(tokens)
    bundle = model.ModelBundle(params, vocab, vocab)
    pairs = [(("w0", "w1"), ("w2",)), (("w3",), ("w4", "w0", "w1"))]
    total_nats = 0.0
    total_tokens = 0
    for s, t in pairs:
        nats, count = model.sequence_nll(
            params, corpus.encode_sentence(vocab, s), corpus.encode_sentence(vocab, t))
        total_nats += nats
        total_tokens += count
    expected = total_nats / total_tokens / math.log(2)
    assert evaluation.corpus_cross_entropy(bundle, pairs) == pytest.approx(
        expected, abs=1e-9)


def test_cross_entropy_order_invariant():
    bundle = uniform_bundle(16)
    pairs = [(("w0",), ("w1", "w2")), (("w3",), ("w4",)), (("w5",), ("w6", "w7"))]
    a = evaluation.corpus_cross_entropy(bundle, pairs)
    b = evaluation.corpus_cross_entropy(bundle, pairs[::-1])
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------------------
# fluency analysis


def test_fluency_no_novel_words():
    report = evaluation.fluency_analysis(
        ["hello world", "hello again"], {"hello", "world", "again"},
        mono_corpus=[], reference_lines=[], rng=nn.make_rng(0, "f"))
    assert report.produced == 0
    assert report.attested == 0.0
    assert report.sample == []


def test_fluency_counts_and_attested_fraction():
    # five novel two-unit words; three appear in the monolingual corpus
    output = ["aa@@ x bb@@ y cc@@ z", "dd@@ w ee@@ v known"]
    parallel_vocab = {"known"}
    mono = ["aax here", "bby there ccz"]
    report = evaluation.fluency_analysis(
        output, parallel_vocab, mono, [], rng=nn.make_rng(0, "f"))
    assert report.produced == 5
    assert report.attested == pytest.approx(0.6)
    assert sorted(report.sample) == ["ddw", "eev"]


def test_fluency_single_unit_novel_words_not_counted():
    report = evaluation.fluency_analysis(
        ["novelword aa@@ bb"], {"x"}, [], [], rng=nn.make_rng(0, "f"))
    assert report.produced == 1  # only the two-unit aabb counts
    assert report.produced_words == ["aabb"]


def test_fluency_reference_counts_as_attested():
    report = evaluation.fluency_analysis(
        ["aa@@ bb"], set(), [], ["aabb somewhere"], rng=nn.make_rng(0, "f"))
    assert report.attested == 1.0


def test_fluency_counts_types_not_tokens():
    report = evaluation.fluency_analysis(
        ["aa@@ bb aa@@ bb aa@@ bb"], set(), [], [], rng=nn.make_rng(0, "f"))
    assert report.produced == 1


def test_fluency_blinded_sample_size_and_determinism():
    output = [" ".join(f"u{i}@@ v{i}" for i in range(30))]
    a = evaluation.fluency_analysis(output, set(), [], [],
                                    rng=nn.make_rng(5, "f"), sample_n=10)
    b = evaluation.fluency_analysis(output, set(), [], [],
                                    rng=nn.make_rng(5, "f"), sample_n=10)
    assert len(a.sample) == 10
    assert a.sample == b.sample
    assert a.sample != sorted(a.sample)  # blinded: not in reading order


def test_fluency_rejects_malformed_marker():
    from btx.subword import SegmentationError

    with pytest.raises(SegmentationError):
        evaluation.fluency_analysis(["oops@@"], set(), [], [],
                                    rng=nn.make_rng(0, "f"))


def test_fluency_case_sensitive_attestation():
    report = evaluation.fluency_analysis(
        ["aa@@ bb"], set(), ["AABB"], [], rng=nn.make_rng(0, "f"))
    assert report.attested == 0.0


# ---------------------------------------------------------------------------
# learning curves


def write_log(path, rows):
    header = "update,epoch,train_ce_bits,dev_ce_bits,dev_bleu,wall_seconds,instances\n"
    path.write_text(header + "".join(rows), encoding="utf-8")


def test_emit_curves_empty_log(tmp_path):
    log = tmp_path / "m.csv"
    write_log(log, [])
    out = tmp_path / "curves.csv"
    evaluation.emit_curves([("run1", str(log))], str(out))
    lines = out.read_text().splitlines()
    assert lines == ["run,instances,train_ce_bits,dev_ce_bits"]


def test_emit_curves_two_runs(tmp_path):
    log_a = tmp_path / "a.csv"
    log_b = tmp_path / "b.csv"
    write_log(log_a, ["100,0,2.5,3.0,10.0,1.0,1600\n"])
    write_log(log_b, ["100,0,2.0,2.5,12.0,1.0,1600\n",
                      "200,1,1.5,2.0,15.0,2.0,3200\n"])
    out = tmp_path / "curves.csv"
    evaluation.emit_curves([("a", str(log_a)), ("b", str(log_b))], str(out))
    lines = out.read_text().splitlines()
    assert lines[0] == "run,instances,train_ce_bits,dev_ce_bits"
    assert [l.split(",")[0] for l in lines[1:]] == ["a", "b", "b"]
    assert (tmp_path / "a.dat").exists() and (tmp_path / "b.dat").exists()
    dat = (tmp_path / "b.dat").read_text().splitlines()
    assert dat[1].split() == ["1600", "2.000000", "2.500000"]


def test_emit_curves_skips_malformed_rows(tmp_path, capsys):
    log = tmp_path / "m.csv"
    write_log(log, ["100,0,2.5,3.0,10.0,1.0,1600\n",
                    "garbage,row,nope,,,x,\n",
                    "200,1,2.0,2.5,12.0,2.0,3200\n"])
    out = tmp_path / "curves.csv"
    evaluation.emit_curves([("r", str(log))], str(out))
    assert len(out.read_text().splitlines()) == 3
    assert "skipping malformed row" in capsys.readouterr().err
