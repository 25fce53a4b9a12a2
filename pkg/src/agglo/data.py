"""Character-level corpus ingestion, splitting and batching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

TEXT8_URL = "http://mattmahoney.net/dc/text8.zip"
SYMBOLS = " abcdefghijklmnopqrstuvwxyz"


class CharVocab:
    """Bijective map between the 27 text8 symbols and ids ``0..26`` (space is 0)."""

    def __init__(self, symbols: str = SYMBOLS):
        if len(set(symbols)) != len(symbols):
            raise DataError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.stoi = {c: i for i, c in enumerate(symbols)}
        # byte -> id; uppercase ASCII folds to lowercase, everything else to space
        table = np.full(256, self.stoi.get(" ", 0), dtype=np.uint8)
        for c, i in self.stoi.items():
            table[ord(c)] = i
            if c.isalpha():
                table[ord(c.upper())] = i
        self._table = table

    def __len__(self):
        return len(self.symbols)

    def encode(self, text: str | bytes) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("latin-1", errors="replace")
        return self._table[np.frombuffer(text, dtype=np.uint8)]

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in np.asarray(ids).reshape(-1))

    def normalize(self, text: str) -> str:
        return self.decode(self.encode(text))


def ingest_text8(path, limit: int | None = None) -> tuple[np.ndarray, CharVocab]:
    """Read at most ``limit`` bytes of ``path`` and map them to token ids."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read() if limit is None else fh.read(limit)
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    if not raw:
        raise DataError(f"corpus {path} is empty")
    vocab = CharVocab()
    return vocab.encode(raw), vocab


@dataclass(frozen=True)
class CorpusSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    fractions: tuple[float, float, float]


def split(stream: np.ndarray, fractions=(0.9, 0.05, 0.05)) -> CorpusSplit:
    """Contiguous train/valid/test split: floor, floor, remainder."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(stream)
    n_train = math.floor(n * fr[0] + 1e-9)
    n_valid = math.floor(n * fr[1] + 1e-9)
    parts = (stream[:n_train], stream[n_train:n_train + n_valid], stream[n_train + n_valid:])
    for name, part in zip(("train", "valid", "test"), parts):
        if len(part) == 0:
            raise DataError(f"{name} split is empty for a stream of {n} tokens")
    return CorpusSplit(*parts, fractions=fr)


def num_windows(n_tokens: int, seq_len: int) -> int:
    return n_tokens // (seq_len + 1)


def windows(stream: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping ``[n, seq_len + 1]`` windows; the partial tail is dropped."""
    n = num_windows(len(stream), seq_len)
    if n == 0:
        raise DataError(f"stream of {len(stream)} tokens is too short for seq_len={seq_len}")
    return np.asarray(stream[: n * (seq_len + 1)], dtype=np.int64).reshape(n, seq_len + 1)


class BatchIterator:
    """Yields ``(inputs, targets)`` pairs of shape ``[b, seq_len]``.

    Window order is shuffled per epoch from ``(seed, epoch)`` when ``shuffle``
    is set; targets are inputs shifted by one token.
    """

    def __init__(self, stream: np.ndarray, seq_len: int, batch_size: int, seed: int = 0,
                 shuffle: bool = True, drop_last: bool = False):
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        self.windows = windows(stream, seq_len)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.drop_last = drop_last
        self.epoch = 0

    def __len__(self):
        n = len(self.windows)
        return n // self.batch_size if self.drop_last else math.ceil(n / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        idx = np.arange(len(self.windows))
        if self.shuffle:
            np.random.default_rng((self.seed, epoch)).shuffle(idx)
        return idx

    def epoch_batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        idx = self.order(epoch)
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            if self.drop_last and len(sel) < self.batch_size:
                break
            w = self.windows[sel]
            yield w[:, :-1], w[:, 1:]

    def __iter__(self):
        epoch = self.epoch
        self.epoch += 1
        return self.epoch_batches(epoch)


def batches(stream: np.ndarray, seq_len: int, batch_size: int, seed: int = 0, epoch: int = 0):
    """One epoch of shuffled ``(inputs, targets)`` batches."""
    return BatchIterator(stream, seq_len, batch_size, seed).epoch_batches(epoch)


def read_corpus_split(path, limit: int | None, fractions=(0.9, 0.05, 0.05)) -> tuple[CorpusSplit, CharVocab]:
    stream, vocab = ingest_text8(Path(path), limit)
    return split(stream, fractions), vocab
