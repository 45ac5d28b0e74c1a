"""Instance and dense branches of the two-branched network, plus RoI cropping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dynamic_ops import DR1ConvLayer, Rank1Factors, dense_merge_level
from .numerics import ShapeError, Tensor, conv2d, linear_interp_matrix, relu, resample, silu
from .routing import split_context

LEVELS = (3, 4, 5, 6, 7)
# longest-side ranges (lo, hi] per level; a side equal to a bound goes to the lower level
LEVEL_RANGES = {3: (0.0, 64.0), 4: (64.0, 128.0), 5: (128.0, 256.0), 6: (256.0, 512.0),
                7: (512.0, math.inf)}
ROI_SIZE = 56

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "silu": silu}


def level_stride(level: int) -> int:
    return 2 ** level


@dataclass
class BranchConfig:
    C: int = 64
    tower_depth: int = 2
    levels: tuple[int, ...] = LEVELS
    dense_channels: int | None = None  # D'; defaults to C
    num_bases: int = 4  # K
    pad_divisibility: int = 4
    activation: str = "silu"

    def __post_init__(self):
        if self.C % 8:
            raise ShapeError(f"channel width must be divisible by 8, got {self.C}")
        if self.dense_channels is None:
            self.dense_channels = self.C
        if self.dense_channels % 8:
            raise ShapeError(f"dense width must be divisible by 8, got {self.dense_channels}")
        if self.dense_channels < self.num_bases:
            raise ShapeError(f"dense width {self.dense_channels} < number of bases {self.num_bases}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        self.levels = tuple(sorted(self.levels))

    @property
    def act(self) -> Callable[[Tensor], Tensor]:
        return ACTIVATIONS[self.activation]


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]

    def __post_init__(self):
        keys = sorted(self.levels)
        if not keys:
            raise ShapeError("empty feature pyramid")
        widths = {self.levels[k].shape[0] for k in keys}
        if len(widths) != 1:
            raise ShapeError(f"pyramid levels differ in channel width: {sorted(widths)}")
        for lo, hi in zip(keys, keys[1:]):
            if hi != lo + 1:
                raise ShapeError(f"pyramid levels must be consecutive, got {keys}")
            fine, coarse = self.levels[lo].shape[1:], self.levels[hi].shape[1:]
            if any((f + 1) // 2 != c for f, c in zip(fine, coarse)):
                raise ShapeError(f"level {hi} extent {coarse} is not half of level {lo} extent {fine}")

    @property
    def strides(self) -> dict[int, int]:
        return {k: level_stride(k) for k in self.levels}

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __iter__(self):
        return iter(sorted(self.levels))


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=stride, pad=self.weight.shape[2] // 2)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


@dataclass
class InstanceBranchParams:
    tower: list[ConvParams]  # shared across levels
    top: ConvParams  # emits context_channels + embed_channels
    context_channels: int

    def parameters(self) -> list[Tensor]:
        out = [p for c in self.tower for p in c.parameters()]
        return out + self.top.parameters()


@dataclass
class InstanceLevel:
    tower: Tensor
    M: Tensor
    E: Tensor


def instance_branch_forward(pyr: FeaturePyramid, params: InstanceBranchParams,
                            activation: Callable[[Tensor], Tensor] = silu) -> dict[int, InstanceLevel]:
    """{M_l, E_l} = Top(Tower(P_l)) on every level."""
    out = {}
    for level in pyr:
        t = pyr[level]
        for block in params.tower:
            t = activation(block(t))
        top = params.top(t)
        out[level] = InstanceLevel(tower=t, M=top[:params.context_channels],
                                   E=top[params.context_channels:])
    return out


def split_dynamic_tensors(M: Tensor) -> Rank1Factors:
    A, B = split_context(M)
    return Rank1Factors(A, B)


# -- assignment --------------------------------------------------------------

@dataclass
class GtInstance:
    box2d: tuple[float, float, float, float]
    class_id: int
    index: int = 0


@dataclass
class InstanceProposal:
    embedding: Tensor
    box2d: tuple[float, float, float, float]
    class_id: int
    level: int
    location: tuple[int, int]
    instance: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box2d
        if not (x2 > x1 and y2 > y1):
            raise ShapeError(f"degenerate proposal box {self.box2d}")

    @property
    def pixel(self) -> tuple[float, float]:
        s = level_stride(self.level)
        return ((self.location[1] + 0.5) * s, (self.location[0] + 0.5) * s)


def level_for_box(box2d: Sequence[float], levels: Sequence[int] = LEVELS) -> int:
    side = max(box2d[2] - box2d[0], box2d[3] - box2d[1])
    for level in sorted(levels):
        lo, hi = LEVEL_RANGES[level]
        if lo < side <= hi or (level == min(levels) and side <= lo):
            return level
    return max(levels)


def assigned_locations(box2d: Sequence[float], level: int, grid: tuple[int, int]) -> list[tuple[int, int]]:
    """Grid cells whose centers fall in the central half of the box, plus the
    cell holding the box center."""
    x1, y1, x2, y2 = box2d
    s = level_stride(level)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = (x2 - x1) / 4, (y2 - y1) / 4
    H, W = grid
    hs = np.arange(H)
    ws = np.arange(W)
    rows = hs[np.abs((hs + 0.5) * s - cy) <= ry]
    cols = ws[np.abs((ws + 0.5) * s - cx) <= rx]
    cells = {(int(h), int(w)) for h in rows for w in cols}
    cells.add((min(max(int(cy // s), 0), H - 1), min(max(int(cx // s), 0), W - 1)))
    return sorted(cells)


def assign_and_filter(E_levels: Mapping[int, Tensor], gt_instances: Sequence[GtInstance],
                      max_per_instance: int | None = None) -> list[InstanceProposal]:
    """Positive proposals for each ground-truth box, carrying embeddings read
    from the embedding map of the box's level."""
    levels = sorted(E_levels)
    proposals = []
    for gt in gt_instances:
        level = level_for_box(gt.box2d, levels)
        E = E_levels[level]
        cells = assigned_locations(gt.box2d, level, E.shape[1:])
        if max_per_instance is not None:
            cells = _closest_to_center(cells, gt.box2d, level)[:max_per_instance]
        for h, w in cells:
            proposals.append(InstanceProposal(E[:, h, w], tuple(gt.box2d), gt.class_id, level,
                                              (h, w), gt.index))
    return proposals


def _closest_to_center(cells, box2d, level):
    s = level_stride(level)
    cx, cy = (box2d[0] + box2d[2]) / 2, (box2d[1] + box2d[3]) / 2
    return sorted(cells, key=lambda hw: ((hw[1] + 0.5) * s - cx) ** 2 + ((hw[0] + 0.5) * s - cy) ** 2)


# -- dense branch ---------------------------------------------------------------

@dataclass
class DenseBranchParams:
    reduce: dict[int, ConvParams]  # 3x3, C -> D'
    dr1: dict[int, DR1ConvLayer]

    def parameters(self) -> list[Tensor]:
        out = [p for c in self.reduce.values() for p in c.parameters()]
        for layer in self.dr1.values():
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out


def dense_branch_forward(pyr: FeaturePyramid, factors: Mapping[int, Rank1Factors],
                         params: DenseBranchParams) -> Tensor:
    """Fold ``dense_merge_level`` from the coarsest level down to the finest."""
    F = None
    for level in sorted(pyr, reverse=True):
        red = params.reduce[level]
        F = dense_merge_level(pyr[level], F, factors[level], red.weight, params.dr1[level], red.bias)
    return F


# -- RoI crop ------------------------------------------------------------------

def roi_sample_coords(lo: float, hi: float, stride: int, out_size: int) -> np.ndarray:
    # sub-cell centers in feature coordinates, shifted so integer index i is
    # the center of feature cell i
    step = (hi - lo) / stride / out_size
    return lo / stride + (np.arange(out_size) + 0.5) * step - 0.5


def crop_roi(F: Tensor, box2d: Sequence[float], out_size: int = ROI_SIZE, stride: int = 8) -> Tensor:
    """Bilinear crop with one sample at the center of each of out_size^2 bins.

    Samples beyond one cell outside the map read zero; nearer ones clamp to
    the border.
    """
    x1, y1, x2, y2 = (float(v) for v in box2d)
    if not (x2 > x1 and y2 > y1):
        raise ShapeError(f"crop_roi: degenerate box {tuple(box2d)}")
    _, H, W = F.shape
    rows = linear_interp_matrix(roi_sample_coords(y1, y2, stride, out_size), H, zero_outside=True)
    cols = linear_interp_matrix(roi_sample_coords(x1, x2, stride, out_size), W, zero_outside=True)
    return resample(F, rows, cols)


def roi_sample_pixels(box2d: Sequence[float], out_size: int = ROI_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Image-pixel coordinates (ys, xs) of the crop's sample points."""
    x1, y1, x2, y2 = box2d
    ys = y1 + (np.arange(out_size) + 0.5) * (y2 - y1) / out_size
    xs = x1 + (np.arange(out_size) + 0.5) * (x2 - x1) / out_size
    return ys, xs
