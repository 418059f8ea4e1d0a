from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydistill.data import (
    CLS,
    PAD,
    RESERVED,
    SEP,
    Example,
    ParseError,
    Vocab,
    batch,
    detokenize,
    encode,
    is_single_piece,
    load_tsv,
    tokenize,
    write_tsv,
)

CHARS = "abcdefghijklmnopqrstuvwxyz"


def char_vocab(extra=()):
    pieces = list(RESERVED)
    for c in CHARS:
        pieces += [c, "##" + c]
    return Vocab(pieces + list(extra))


def test_whole_word_is_single_id():
    v = char_vocab(["movie"])
    assert tokenize(v, "movie") == [v.id("movie")]
    assert is_single_piece(v, "movie")


def test_unknown_word_falls_back_to_characters():
    v = char_vocab()
    pieces = [v.pieces[i] for i in tokenize(v, "unknownword")]
    assert pieces == ["u"] + ["##" + c for c in "nknownword"]
    assert not is_single_piece(v, "unknownword")


def test_greedy_longest_match():
    v = char_vocab(["play", "##ing", "pla"])
    assert [v.pieces[i] for i in tokenize(v, "playing")] == ["play", "##ing"]


def test_empty_word_rejected():
    with pytest.raises(ValueError):
        is_single_piece(char_vocab(), "")


@settings(max_examples=50)
@given(word=st.text(alphabet=CHARS, min_size=1, max_size=12))
def test_detokenize_inverts_tokenize(word):
    v = char_vocab(["play", "##ing", "the", "##re", "movie"])
    assert detokenize(v, tokenize(v, word)) == word


def test_vocab_invariants():
    with pytest.raises(ValueError):
        Vocab(["a", "b", "c", "d"])
    with pytest.raises(ValueError):
        Vocab(list(RESERVED) + ["x", "x"])
    v = Vocab.build(["the movie was good", "the plot was bad"], max_words=2)
    assert v.pieces[:4] == list(RESERVED)
    assert {"the", "was"} <= set(v.pieces)
    assert v.missing_characters(["the movie"]) == set()


def test_vocab_file_round_trip(tmp_path):
    v = char_vocab(["movie"])
    v.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt").pieces == v.pieces
    assert (tmp_path / "vocab.txt").read_text().split("\n")[5] == "##a"


def test_load_tsv(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("text_a\tlabel\ngood film\t1\nbad film\t0\n")
    ex = load_tsv(p, num_classes=2)
    assert [(e.text_a, e.label, e.text_b) for e in ex] == [("good film", 1, None), ("bad film", 0, None)]
    empty = tmp_path / "e.tsv"
    empty.write_text("")
    assert load_tsv(empty) == []


def test_load_tsv_pairs_round_trip(tmp_path):
    src = [Example("a man sleeps", 0, "a person rests"), Example("it rains", 1, "sun shines")]
    write_tsv(tmp_path / "p.tsv", src)
    assert load_tsv(tmp_path / "p.tsv", num_classes=2) == src


def test_load_tsv_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("text\tlabel\nx\t1\n")
    with pytest.raises(ParseError, match="text_a"):
        load_tsv(p)
    p.write_text("text_a\tlabel\nx\t1\ny\tmaybe\n")
    with pytest.raises(ParseError, match="line 3"):
        load_tsv(p)
    p.write_text("text_a\tlabel\nx\t5\n")
    with pytest.raises(ParseError, match="line 2"):
        load_tsv(p, num_classes=2)


def test_regression_labels_parse_as_float(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("text_a\tlabel\nx\t3.5\n")
    assert load_tsv(p)[0].label == 3.5


def test_encode_single_and_pair():
    v = char_vocab(["good", "bad"])
    assert encode(v, Example("good", 1), 8) == [CLS, v.id("good"), SEP]
    assert encode(v, Example("good", 1, "bad"), 8) == [CLS, v.id("good"), SEP, v.id("bad"), SEP]


def test_pair_truncation_keeps_both_separators():
    v = char_vocab()
    ids = encode(v, Example("abcdefgh", 0, "xyz"), 9)
    assert len(ids) == 9
    assert ids[0] == CLS and ids[-1] == SEP
    assert ids.count(SEP) == 2
    # the longer text was trimmed first: 6 budget -> 3 + 3
    assert ids.index(SEP) == 4


def _corpus(n=11):
    return [Example(" ".join(["good"] * (i % 4 + 1)), i % 2) for i in range(n)]


def test_batch_sizes_and_padding():
    v = char_vocab(["good"])
    batches = batch(_corpus(), v, 16, 1, seed=0)
    assert len(batches) == 11 and all(b.tokens.shape[0] == 1 for b in batches)
    for b in batch(_corpus(), v, 16, 4, seed=0):
        assert (b.tokens[:, 0] == CLS).all()
        np.testing.assert_array_equal(b.pad_mask, b.tokens != PAD)
        assert b.pad_mask.any(axis=0).all()


def test_batch_same_seed_same_order():
    v = char_vocab(["good"])
    a = [b.indices.tolist() for b in batch(_corpus(), v, 16, 3, seed=5)]
    assert a == [b.indices.tolist() for b in batch(_corpus(), v, 16, 3, seed=5)]
    assert a != [b.indices.tolist() for b in batch(_corpus(), v, 16, 3, seed=6)]


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 30), size=st.integers(1, 8), seed=st.integers(0, 100))
def test_batching_is_a_permutation(n, size, seed):
    v = char_vocab(["good"])
    idx = [i for b in batch(_corpus(n), v, 16, size, seed=seed) for i in b.indices.tolist()]
    assert Counter(idx) == Counter(range(n))
