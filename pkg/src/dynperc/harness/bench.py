"""Wall-clock comparison of DR1Conv against the per-position dense oracle."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..dynamic_ops import DR1ConvLayer, Rank1Factors, dr1conv, induced_position_kernels, oracle_dense_dynamic_conv
from ..numerics import Tensor

BENCH_FIELDS = ("channels", "height", "width", "kernel", "repeats", "dr1conv_median_s",
                "oracle_median_s", "speedup", "max_abs_diff")


@dataclass
class BenchResult:
    channels: int
    height: int
    width: int
    kernel: int
    repeats: int
    dr1conv_median_s: float
    oracle_median_s: float
    speedup: float
    max_abs_diff: float
    dr1conv_times: list[float]
    oracle_times: list[float]

    def row(self) -> dict:
        return {k: getattr(self, k) for k in BENCH_FIELDS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
                writer.writeheader()
                writer.writerow(self.row())


def _timed(fn) -> tuple[float, np.ndarray]:
    start = time.perf_counter()
    out = fn()
    return time.perf_counter() - start, out


def bench_dr1conv(channels: int = 64, height: int = 128, width: int = 128, kernel: int = 3,
                  repeats: int = 3, seed: int = 0) -> BenchResult:
    """Median timings of both paths on identical inputs (forward only)."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError(f"kernel must be a positive odd size, got {kernel}")
    rng = np.random.default_rng(seed)
    shape = (channels, height, width)
    X = rng.standard_normal(shape)
    A = rng.standard_normal(shape)
    B = rng.standard_normal(shape)
    W = rng.standard_normal((channels, channels, kernel, kernel)) / np.sqrt(channels * kernel * kernel)
    layer = DR1ConvLayer(Tensor(W))
    factors = Rank1Factors(Tensor(A), Tensor(B))
    x = Tensor(X)

    fast, slow = [], []
    diff = 0.0
    for _ in range(repeats):
        t_fast, y_fast = _timed(lambda: dr1conv(x, factors, layer).data)
        t_slow, y_slow = _timed(lambda: oracle_dense_dynamic_conv(X, induced_position_kernels(W, A, B)))
        fast.append(t_fast)
        slow.append(t_slow)
        diff = max(diff, float(np.max(np.abs(y_fast - y_slow))))
    mf, ms = statistics.median(fast), statistics.median(slow)
    return BenchResult(channels, height, width, kernel, repeats, mf, ms, ms / mf, diff, fast, slow)
