import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agglo.data import (
    SYMBOLS,
    BatchIterator,
    CharVocab,
    batches,
    ingest_text8,
    num_windows,
    read_corpus_split,
    split,
    windows,
)
from agglo.errors import DataError

V = CharVocab()


def ids(text):
    return [SYMBOLS.index(c) for c in text]


def test_vocab_is_space_plus_alphabet():
    assert len(V) == 27
    assert V.symbols[0] == " " and V.symbols[1:] == "abcdefghijklmnopqrstuvwxyz"


def test_encode_lowercase():
    assert V.encode("abc").tolist() == ids("abc")


def test_encode_folds_case_and_maps_unknown_to_space():
    assert V.encode("A9b").tolist() == ids("a b")
    assert V.decode(V.encode("Hello, World!")) == "hello  world "


def test_non_ascii_maps_to_space():
    assert V.normalize("café中") == "caf  "


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(min_codepoint=0, max_codepoint=127)))
def test_round_trip_is_normalization(s):
    expected = "".join(c.lower() if c.isascii() and c.lower() in SYMBOLS else " " for c in s)
    enc = V.encode(s)
    assert enc.min(initial=0) >= 0 and enc.max(initial=0) < 27
    assert V.decode(enc) == expected
    assert V.normalize(V.normalize(s)) == V.normalize(s)


def test_bijection():
    assert V.decode(range(27)) == SYMBOLS
    assert V.encode(SYMBOLS).tolist() == list(range(27))


def test_duplicate_symbols_rejected():
    with pytest.raises(DataError):
        CharVocab("aab")


def test_ingest_respects_limit(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(b"Hello World" * 10)
    stream, vocab = ingest_text8(path, limit=5)
    assert vocab.decode(stream) == "hello"
    full, _ = ingest_text8(path)
    assert len(full) == 110


def test_ingest_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        ingest_text8(tmp_path / "missing.txt")


def test_ingest_empty_file_is_data_error(tmp_path):
    path = tmp_path / "e.txt"
    path.write_bytes(b"")
    with pytest.raises(DataError):
        ingest_text8(path)


@pytest.mark.parametrize("n,fractions,sizes", [
    (100, (0.9, 0.05, 0.05), (90, 5, 5)),
    (10, (0.8, 0.1, 0.1), (8, 1, 1)),
    (103, (0.9, 0.05, 0.05), (92, 5, 6)),
    (1_000_000, (0.9, 0.05, 0.05), (900_000, 50_000, 50_000)),
])
def test_split_sizes(n, fractions, sizes):
    s = split(np.arange(n), fractions)
    assert (len(s.train), len(s.valid), len(s.test)) == sizes


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 5000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_split_is_contiguous_partition(n, a, b):
    if a + b >= 0.99:
        return
    stream = np.arange(n)
    try:
        s = split(stream, (a, b, 1 - a - b))
    except DataError:
        return
    np.testing.assert_array_equal(np.concatenate([s.train, s.valid, s.test]), stream)


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.9, 0.1, 0.1), (1.0, 0.0, 0.0), (-0.1, 0.6, 0.5)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(DataError):
        split(np.arange(100), fractions)


def test_split_rejects_empty_part():
    with pytest.raises(DataError):
        split(np.arange(5), (0.9, 0.05, 0.05))


def test_windows_example():
    stream = np.arange(1, 10)
    b = list(BatchIterator(stream, 3, 2, shuffle=False).epoch_batches(0))
    assert len(b) == 1
    x, y = b[0]
    assert x.tolist() == [[1, 2, 3], [5, 6, 7]]
    assert y.tolist() == [[2, 3, 4], [6, 7, 8]]


def test_stream_too_short():
    with pytest.raises(DataError):
        windows(np.arange(3), 3)


def test_same_seed_same_order():
    stream = np.arange(1000)
    a = [x.tolist() for x, _ in batches(stream, 9, 4, seed=5)]
    b = [x.tolist() for x, _ in batches(stream, 9, 4, seed=5)]
    c = [x.tolist() for x, _ in batches(stream, 9, 4, seed=6)]
    assert a == b and a != c


def test_epochs_reshuffle():
    it = BatchIterator(np.arange(1000), 9, 4, seed=1)
    assert not np.array_equal(it.order(0), it.order(1))
    first = [x.tolist() for x, _ in it]
    second = [x.tolist() for x, _ in it]
    assert first != second


def test_target_coverage_enumeration():
    stream = np.arange(1000)
    seq_len = 7
    covered = set()
    for x, y in batches(stream, seq_len, 5, seed=0):
        np.testing.assert_array_equal(y[:, :-1], x[:, 1:])
        covered.update(y.reshape(-1).tolist())
    n_win = 1000 // 8
    starts = {w * 8 for w in range(n_win)}
    expected = set(range(n_win * 8)) - starts
    assert covered == expected
    assert len(covered) == n_win * seq_len


@settings(max_examples=50, deadline=None)
@given(st.integers(20, 3000), st.integers(1, 40), st.integers(1, 9))
def test_epoch_token_count(n, seq_len, batch):
    stream = np.arange(n)
    if num_windows(n, seq_len) == 0:
        with pytest.raises(DataError):
            BatchIterator(stream, seq_len, batch)
        return
    total = sum(y.size for _, y in batches(stream, seq_len, batch))
    assert total == (n // (seq_len + 1)) * seq_len


def test_drop_last():
    it = BatchIterator(np.arange(100), 9, 3, drop_last=True)
    sizes = [len(x) for x, _ in it.epoch_batches(0)]
    assert sizes == [3, 3, 3] and len(it) == 3
    assert len(BatchIterator(np.arange(100), 9, 3)) == 4


def test_batches_never_cross_split_boundary():
    stream = np.arange(1000)
    s = split(stream, (0.9, 0.05, 0.05))
    for x, y in batches(s.train, 10, 8):
        assert y.max() < 900
    for x, y in batches(s.valid, 10, 8):
        assert x.min() >= 900 and y.max() < 950


def test_read_corpus_split(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("the quick brown fox " * 50)
    corpus, vocab = read_corpus_split(path, 200)
    assert (len(corpus.train), len(corpus.valid), len(corpus.test)) == (180, 10, 10)
    assert vocab.decode(corpus.train[:9]) == "the quick"
