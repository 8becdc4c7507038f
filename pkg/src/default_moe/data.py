"""Byte-level corpus loading and deterministic batch sampling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MIN_RECOMMENDED_CHARS = 100_000


class CorpusError(ValueError):
    """The corpus cannot be loaded (empty input, vocabulary overflow)."""


@dataclass
class Corpus:
    """Token streams with the byte vocabulary and a per-token source tag."""

    train: np.ndarray
    val: np.ndarray
    vocab: list[int]
    train_tags: np.ndarray
    val_tags: np.ndarray
    tag_names: list[str]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(self.vocab[i] for i in ids).decode("utf-8", errors="replace")

    def encode(self, text: str | bytes) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        lookup = {b: i for i, b in enumerate(self.vocab)}
        try:
            return np.array([lookup[b] for b in raw], dtype=np.int64)
        except KeyError as exc:
            raise CorpusError(f"byte {exc.args[0]} is not in the corpus vocabulary") from None

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(bytes(self.vocab))
        h.update(self.train.astype("<i8").tobytes())
        h.update(self.val.astype("<i8").tobytes())
        return h.hexdigest()


def _expand(paths: Sequence[str | Path]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir() if f.is_file() and f.suffix == ".txt"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"corpus path not found: {p}")
    if not files:
        raise CorpusError(f"no corpus files under {list(map(str, paths))}")
    return files


def load_corpus(paths: str | Path | Sequence[str | Path], train_fraction: float = 0.9,
                max_vocab: int = 256) -> Corpus:
    """Tokenise text files bytewise and split each file into train / val.

    The first ``train_fraction`` of every file goes to train and the rest to
    val, so every source appears in both streams. Each token is tagged with
    the index of its source file.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    files = _expand(paths)
    raws = []
    for f in files:
        raw = f.read_bytes()
        if not raw:
            raise CorpusError(f"empty corpus file: {f}")
        raws.append(raw)
    return corpus_from_bytes(raws, [f.stem for f in files], train_fraction, max_vocab)


def corpus_from_bytes(raws: Sequence[bytes], names: Sequence[str] | None = None, train_fraction: float = 0.9,
                      max_vocab: int = 256) -> Corpus:
    """Build a :class:`Corpus` from in-memory documents (one tag per document)."""
    if not raws or any(len(r) == 0 for r in raws):
        raise CorpusError("corpus documents must be non-empty")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    total = sum(map(len, raws))
    if total < MIN_RECOMMENDED_CHARS:
        logger.warning("corpus has %d bytes, fewer than the recommended %d", total, MIN_RECOMMENDED_CHARS)

    vocab = sorted(set().union(*map(set, raws)))
    if len(vocab) > max_vocab:
        raise CorpusError(f"corpus alphabet has {len(vocab)} symbols, exceeds max_vocab={max_vocab}")
    lookup = np.zeros(256, dtype=np.int64)
    lookup[vocab] = np.arange(len(vocab))

    train, val, train_tags, val_tags = [], [], [], []
    for tag, raw in enumerate(raws):
        ids = lookup[np.frombuffer(raw, dtype=np.uint8)]
        cut = int(round(len(ids) * train_fraction))
        train.append(ids[:cut])
        val.append(ids[cut:])
        train_tags.append(np.full(cut, tag, dtype=np.int32))
        val_tags.append(np.full(len(ids) - cut, tag, dtype=np.int32))
    names = list(names) if names is not None else [f"doc{i}" for i in range(len(raws))]
    return Corpus(np.concatenate(train), np.concatenate(val), vocab,
                  np.concatenate(train_tags), np.concatenate(val_tags), names)


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int, seed: int, step: int,
                 tags: np.ndarray | None = None):
    """Random training windows; a pure function of ``(seed, step)``.

    Returns ``(inputs, targets)`` or ``(inputs, targets, tags)`` with inputs
    and targets of shape ``(batch_size, seq_len)``.
    """
    if len(tokens) <= seq_len:
        raise CorpusError(f"token stream of length {len(tokens)} is too short for seq_len={seq_len}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, len(tokens) - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)
    windows = tokens[idx]
    if tags is None:
        return windows[:, :-1], windows[:, 1:]
    return windows[:, :-1], windows[:, 1:], tags[idx[:, :-1]]


def eval_windows(tokens: np.ndarray, seq_len: int, max_windows: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping windows tiling the stream.

    With ``max_windows`` smaller than the number of tiles, that many tiles
    are taken at evenly spaced positions so every part of the stream is
    represented.
    """
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise CorpusError(f"validation stream of length {len(tokens)} is too short for seq_len={seq_len}")
    tiles = np.arange(n)
    if max_windows is not None and max_windows < n:
        tiles = tiles[np.linspace(0, n - 1, max_windows).round().astype(np.int64)]
    idx = tiles[:, None] * seq_len + np.arange(seq_len + 1)
    windows = tokens[idx]
    return windows[:, :-1], windows[:, 1:]
