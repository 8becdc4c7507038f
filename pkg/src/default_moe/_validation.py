"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_documents(X) -> list[bytes]:
    """Normalise text input to a list of non-empty byte strings.

    Accepts a single ``str``/``bytes`` or a sequence of them.
    """
    if isinstance(X, (str, bytes, bytearray)):
        X = [X]
    if not isinstance(X, Sequence) or isinstance(X, np.ndarray) and X.dtype.kind not in "OUS":
        raise TypeError(f"expected text or a sequence of texts, got {type(X).__name__}")
    docs = []
    for i, doc in enumerate(X):
        if isinstance(doc, str):
            doc = doc.encode("utf-8")
        elif isinstance(doc, (bytes, bytearray)):
            doc = bytes(doc)
        else:
            raise TypeError(f"document {i} is {type(doc).__name__}, expected str or bytes")
        if not doc:
            raise ValueError(f"document {i} is empty")
        docs.append(doc)
    if not docs:
        raise ValueError("no documents given")
    return docs


def check_token_windows(X, vocab_size: int, max_len: int | None = None) -> np.ndarray:
    """Validate a (n_windows, length) integer array of token ids."""
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError(f"expected a 2-D array of token ids, got shape {arr.shape}")
    if arr.dtype.kind not in "iu":
        raise TypeError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    if max_len is not None and arr.shape[1] > max_len:
        raise ValueError(f"windows of length {arr.shape[1]} exceed the model context {max_len}")
    return arr.astype(np.int64, copy=False)


def check_in(name: str, value, allowed) -> None:
    if value not in allowed:
        raise ValueError(f"{name}={value!r} is not one of {tuple(allowed)}")


def check_positive(name: str, value, allow_zero: bool = False) -> None:
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
