"""Single-file binary checkpoints.

Layout (all integers and arrays little-endian)::

    magic        8 bytes   b"DMOECKPT"
    version      u32       currently 1
    header_len   u32
    header       header_len bytes of UTF-8 JSON: config, config_hash, n_records
    records      n_records times:
        name_len u16, name (UTF-8)
        dtype    u8   0=float32 1=float64 2=int64
        ndim     u8, then ndim x u32 extents
        payload  row-major values

Record order: ``step``; model parameters in model order (``param/<name>``);
per MoE layer ``bank<k>/vectors``, ``bank<k>/beta``, ``bank<k>/steps``;
``adam/t``; ``adam/m/<name>`` and ``adam/v/<name>`` in parameter order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"DMOECKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def _write_record(buf: io.BufferedIOBase, name: str, value) -> None:
    arr = np.asarray(value)
    if arr.dtype.kind == "i":
        arr = arr.astype(np.int64)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_record(buf: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode()
    code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
    if code not in _DTYPES:
        raise CheckpointError(f"{name}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def save_checkpoint(path: str | Path, model, optimizer=None, step: int = 0, config: Optional[dict] = None,
                    config_hash: str = "") -> None:
    records: list[tuple[str, np.ndarray]] = [("step", np.int64(step))]
    for name, p in model.parameters().items():
        records.append((f"param/{name}", p.data))
    for k, layer in enumerate(model.moe_layers):
        records.append((f"bank{k}/vectors", layer.bank.vectors))
        records.append((f"bank{k}/beta", np.float64(layer.bank.beta)))
        records.append((f"bank{k}/steps", np.int64(layer.bank.steps)))
    if optimizer is not None:
        records.append(("adam/t", np.int64(optimizer.t)))
        for name in model.parameters():
            records.append((f"adam/m/{name}", optimizer.m[name]))
            records.append((f"adam/v/{name}", optimizer.v[name]))
    header = json.dumps({"config": config or {}, "config_hash": config_hash, "n_records": len(records)},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for name, value in records:
            _write_record(f, name, value)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, records)`` without touching any model."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(_read_exact(f, header_len))
        records = dict(_read_record(f) for _ in range(header["n_records"]))
    return header, records


def load_checkpoint(path: str | Path, model, optimizer=None) -> dict:
    """Restore parameters, default-vector banks and optimizer moments in place.

    Returns the header with ``step`` added.
    """
    header, records = read_checkpoint(path)
    model.load_state_arrays({k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")})
    for k, layer in enumerate(model.moe_layers):
        try:
            layer.bank.load_state_dict({"vectors": records[f"bank{k}/vectors"],
                                        "beta": records[f"bank{k}/beta"], "steps": records[f"bank{k}/steps"]})
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks default-vector state {exc}") from None
    if optimizer is not None:
        if "adam/t" not in records:
            raise CheckpointError("checkpoint has no optimizer state")
        optimizer.load_state_dict({
            "t": records["adam/t"],
            "m": {n: records[f"adam/m/{n}"] for n in model.parameters()},
            "v": {n: records[f"adam/v/{n}"] for n in model.parameters()},
        })
    header["step"] = int(records["step"])
    return header
