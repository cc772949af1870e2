import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softpivot.data import (
    BOS,
    EOS,
    PAD,
    UNK,
    ParallelCorpus,
    SyntheticTaskSpec,
    TrilingualCorpus,
    Vocab,
    batch_iter,
    build_vocab,
    generate_synthetic,
    read_corpus,
    render_pivot,
    render_target,
    write_corpus,
)

SMALL = SyntheticTaskSpec(size_sp=300, size_pt=300, size_st=40, size_dev=20, size_test=30)


@pytest.fixture(scope="module")
def task():
    return generate_synthetic(SMALL)


def test_reserved_ids():
    v = Vocab(["a"])
    assert (v.stoi["<pad>"], v.stoi["<s>"], v.stoi["</s>"], v.stoi["<unk>"]) == (PAD, BOS, EOS, UNK)
    assert v.stoi["a"] == 4
    assert v.encode("a zz") == [4, UNK]


def test_build_vocab_first_seen_order():
    v = build_vocab([["b a", "c b"], ["d"]])
    assert v.itos[4:] == ["b", "a", "c", "d"]
    with pytest.raises(ValueError):
        build_vocab([[]])


def test_default_spec_worked_example():
    spec = SyntheticTaskSpec()
    assert render_pivot([4, 9], spec) == "p7 p12"
    assert render_target([4, 9], spec) == "t16 t11"


def test_default_corpus_sizes():
    spec = SyntheticTaskSpec()
    task = generate_synthetic(spec)
    assert (len(task.sp), len(task.pt), len(task.st)) == (20000, 20000, 800)
    lengths = [len(s.split()) for s in task.sp.src]
    assert min(lengths) == 3 and max(lengths) == 12


def test_identity_spec_is_relabelling():
    spec = dataclasses.replace(SMALL, shift_sp=0, shift_pt=0, target_transform="identity")
    task = generate_synthetic(spec)
    for s, p in zip(task.sp.src, task.sp.tgt):
        assert p == s.replace("s", "p")
        assert task.oracle_sp(s) == p
    for s, t in zip(task.st.src, task.st.tgt):
        assert task.oracle_st(s) == t == s.replace("s", "t")


def test_generation_is_deterministic(task):
    again = generate_synthetic(SMALL)
    for name in task.corpora:
        assert task.corpora[name] == again.corpora[name]
    other = generate_synthetic(dataclasses.replace(SMALL, seed=14))
    assert other.sp != task.sp


def test_corpus_sizes_do_not_couple():
    a = generate_synthetic(SMALL)
    b = generate_synthetic(dataclasses.replace(SMALL, size_sp=10))
    assert a.pt == b.pt and a.st == b.st


def test_oracles_commute(task):
    for name in ("sp", "st", "dev", "test"):
        for x in task.corpora[name].src:
            assert task.oracle_pt(task.oracle_sp(x)) == task.oracle_st(x)
    for x, y in zip(task.pt.src, task.pt.tgt):
        assert task.oracle_pt(x) == y


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(latent_vocab_size=3)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(min_len=5, max_len=4)
    with pytest.raises(ValueError):
        SyntheticTaskSpec().check_model_len(13)
    SyntheticTaskSpec().check_model_len(14)


def test_vocab_round_trip(task, tmp_path):
    v = build_vocab([task.sp.src, task.sp.tgt])
    for s in task.sp.src + task.sp.tgt:
        assert v.decode(v.encode(s)) == s
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v
    # line number + 4 is the id
    assert (tmp_path / "v.txt").read_text().splitlines()[0] == v.itos[4]


def test_decode_stops_at_eos():
    v = Vocab(["a", "b"])
    assert v.decode([BOS, 4, 5, EOS, 4]) == "a b"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(4, 9), min_size=1, max_size=9), min_size=1, max_size=60),
       st.integers(9, 40), st.integers(0, 3), st.integers(0, 2))
def test_batches_cover_each_example_once(seqs, max_tokens, seed, epoch):
    examples = [(s, s + [EOS]) for s in seqs]
    max_tokens = max(max_tokens, max(len(s) for s in seqs) + 1)
    seen = []
    for b in batch_iter(examples, max_tokens, seed, epoch):
        width = max(f.shape[1] for f in b.fields)
        assert width * len(b) <= max_tokens
        for row, i in enumerate(b.indices):
            assert b.fields[1][row, : len(examples[i][1])].tolist() == examples[i][1]
            assert np.all(b.fields[1][row, len(examples[i][1]):] == PAD)
        seen.extend(b.indices.tolist())
    assert sorted(seen) == list(range(len(examples)))


def test_batch_order_depends_on_seed_and_epoch():
    examples = [([4] * (1 + i % 5), [5]) for i in range(200)]

    def order(seed, epoch):
        return [i for b in batch_iter(examples, 24, seed, epoch) for i in b.indices.tolist()]

    assert order(0, 0) == order(0, 0)
    assert order(0, 0) != order(0, 1)
    assert order(0, 0) != order(1, 0)


def test_batch_rejects_oversized_sentence():
    with pytest.raises(ValueError, match="example 1"):
        list(batch_iter([([4], [5]), ([4] * 9, [5])], 5, 0))


def test_corpus_round_trip(task, tmp_path):
    write_corpus(tmp_path / "c" / "st", task.st)
    assert read_corpus(tmp_path / "c" / "st") == task.st
    tri = TrilingualCorpus(["s1 s2"], ["p1"], ["t2 t1"])
    write_corpus(tmp_path / "tri", tri)
    assert read_corpus(tmp_path / "tri") == tri
    assert (tmp_path / "tri.piv").read_bytes() == b"p1\n"


def test_line_count_mismatch_names_line(tmp_path):
    (tmp_path / "bad.src").write_text("s1\ns2\ns3\n")
    (tmp_path / "bad.tgt").write_text("t1\nt2\n")
    with pytest.raises(ValueError, match="line 3"):
        read_corpus(tmp_path / "bad")


def test_empty_side_rejected():
    with pytest.raises(ValueError):
        ParallelCorpus(["a", " "], ["b", "c"])
