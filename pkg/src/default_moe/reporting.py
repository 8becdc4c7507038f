"""CSV / JSON-lines writers and content hashing for run artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

METRIC_COLUMNS = ("step", "mode", "seed", "train_loss", "val_loss", "ppl", "aux_loss", "tokens_per_sec")


def git_blob_hash(payload: bytes) -> str:
    """SHA-1 over ``b"blob <len>\\0" + payload``, as git hashes file contents."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed header written on creation."""

    def __init__(self, path: str | Path, columns: Sequence[str] = METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c)) for c in self.columns])


class JsonlLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, event: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(event, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_jsonable) + "\n")


def write_matrix_csv(path: str | Path, matrix: np.ndarray, header: Iterable[str] | None = None,
                     comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f)
        if header is not None:
            w.writerow(list(header))
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def write_manifest(out_dir: str | Path, command: str, config: dict, seeds: Sequence[int], extra: dict | None = None) -> str:
    """Write ``manifest.json`` and return its content hash."""
    body = {"command": command, "config": config, "seeds": list(seeds)}
    if extra:
        body.update(extra)
    payload = json.dumps(body, sort_keys=True, default=_jsonable).encode()
    digest = git_blob_hash(payload)
    write_json(Path(out_dir) / "manifest.json", {**body, "content_hash": digest})
    return digest
