"""Tensor wire format: one JSON header line, then little-endian float64 data."""

from __future__ import annotations

import json
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .tensor import ShapeError, Tensor


def tensor_to_bytes(t: Tensor) -> bytes:
    header = json.dumps({"shape": list(t.shape), "dtype": "f64"}).encode() + b"\n"
    return header + t.data.astype("<f8").tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> Tensor:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise ShapeError("tensor blob lacks a header line")
    meta = json.loads(head)
    if meta.get("dtype") != "f64":
        raise ShapeError(f"unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(int(n) for n in meta["shape"])
    expected = int(np.prod(shape)) * 8
    if len(body) != expected:
        raise ShapeError(f"payload has {len(body)} bytes, header implies {expected}")
    return Tensor(np.frombuffer(body, dtype="<f8").reshape(shape))


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(tensor_to_bytes(t))


def save_tensor(path: str | Path, t: Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
