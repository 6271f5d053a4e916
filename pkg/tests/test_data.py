import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inclt.data import (PAD, PAD_ID, UNK, UNK_ID, Corpus, DataFormatError, Example, Vocab,
                        build_vocabs, load_text_embeddings, read_classification, read_conll,
                        split_counts, split_random, write_classification, write_conll)

CONLL = "The\tDET\ncat\tNOUN\nsat\tVERB\n\nDogs\tNOUN\nbark\tVERB\n"


def test_read_conll_fixture(tmp_path):
    path = tmp_path / "a.conll"
    path.write_text(CONLL, encoding="utf-8")
    corpus = read_conll(path)
    assert corpus.task == "tagging" and len(corpus) == 2
    assert corpus.examples[0].tokens == ["The", "cat", "sat"]
    assert corpus.examples[1].labels == ["NOUN", "VERB"]
    assert read_conll(path, lowercase=True).examples[0].tokens[0] == "the"


def test_read_conll_tolerates_repeated_blank_lines_and_no_final_newline(tmp_path):
    path = tmp_path / "a.conll"
    path.write_text("\n\na\tX\n\n\n\nb\tY", encoding="utf-8")
    assert [ex.tokens for ex in read_conll(path)] == [["a"], ["b"]]


def test_read_conll_reports_path_and_line(tmp_path):
    path = tmp_path / "bad.conll"
    path.write_text("a\tX\nb X\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=r"bad.conll:2"):
        read_conll(path)


def test_conll_round_trip(tmp_path):
    src = tmp_path / "a.conll"
    src.write_text(CONLL, encoding="utf-8")
    corpus = read_conll(src)
    dst = tmp_path / "b.conll"
    write_conll(corpus, dst)
    assert read_conll(dst) == corpus


def test_classification_fixture_and_round_trip(tmp_path):
    path = tmp_path / "a.tsv"
    path.write_text("pos\tgood film\nneg\tbad\n\n", encoding="utf-8")
    corpus = read_classification(path)
    assert [(ex.labels, ex.tokens) for ex in corpus] == [("pos", ["good", "film"]),
                                                          ("neg", ["bad"])]
    out = tmp_path / "b.tsv"
    write_classification(corpus, out)
    assert read_classification(out) == corpus


def test_classification_missing_text_is_an_error(tmp_path):
    path = tmp_path / "a.tsv"
    path.write_text("pos\tok\nneg\t \n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=":2"):
        read_classification(path)


def test_example_validation():
    with pytest.raises(ValueError):
        Example([], [])
    with pytest.raises(ValueError):
        Example(["a", "b"], ["X"])
    with pytest.raises(ValueError):
        Corpus("parsing")


def test_vocab_reserves_pad_and_unk():
    v = Vocab(["a", "b", "a"])
    assert v.itos[:2] == [PAD, UNK] and PAD_ID == 0 and UNK_ID == 1
    assert v.encode(["a", "b", "zzz"]) == [2, 3, UNK_ID]
    v.freeze()
    assert v.add("new") == UNK_ID and len(v) == 4


def test_label_vocab_without_specials_rejects_unknown():
    v = Vocab(["X"], specials=False).freeze()
    with pytest.raises(KeyError):
        v.lookup("Y")


def test_vocab_list_round_trip():
    v = Vocab(["x", "y"])
    assert Vocab.from_list(v.to_list()).stoi == v.stoi
    with pytest.raises(ValueError):
        Vocab.from_list(["x", "y"])


def test_build_vocabs_uses_train_only():
    train = Corpus("tagging", [Example(["a", "b"], ["Y", "X"])])
    tokens, labels = build_vocabs(train)
    assert tokens.to_list() == [PAD, UNK, "a", "b"]
    assert labels.to_list() == ["X", "Y"]
    assert tokens.lookup("unseen") == UNK_ID


@pytest.mark.parametrize("n, expected", [(10, [7, 1, 2]), (1, [1, 0, 0]), (0, [0, 0, 0]),
                                         (3, [2, 0, 1]), (100, [70, 10, 20])])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


@given(st.integers(0, 500))
def test_split_counts_partition(n):
    counts = split_counts(n)
    assert sum(counts) == n and all(c >= 0 for c in counts)
    assert all(abs(c - n * f) < 1 for c, f in zip(counts, (0.7, 0.1, 0.2)))


def test_split_random_is_seeded_and_disjoint():
    corpus = Corpus("classification", [Example([f"w{i}"], "A") for i in range(10)])
    a = split_random(corpus, seed=3)
    b = split_random(corpus, seed=3)
    assert a == b
    assert [len(p) for p in a] == [7, 1, 2]
    seen = [ex.tokens[0] for part in a for ex in part]
    assert sorted(seen) == sorted(f"w{i}" for i in range(10))
    assert [p.split for p in a] == ["train", "valid", "test"]


def test_filter_length():
    corpus = Corpus("classification", [Example(["a"] * n, "A") for n in (1, 5, 3)])
    assert [len(ex.tokens) for ex in corpus.filter_length(3)] == [1, 3]


def test_load_text_embeddings(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("a 1.0 2.0\nzzz 3.0 4.0\n", encoding="utf-8")
    vocab = Vocab(["a", "b"])
    table = load_text_embeddings(path, vocab, rng=np.random.default_rng(0))
    assert table.shape == (4, 2)
    np.testing.assert_array_equal(table[vocab.lookup("a")], [1.0, 2.0])
    np.testing.assert_array_equal(table[PAD_ID], [0.0, 0.0])
    path.write_text("a 1.0 2.0\nb 3.0\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=":2"):
        load_text_embeddings(path, vocab)
