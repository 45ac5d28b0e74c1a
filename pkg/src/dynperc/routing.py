"""Channel-wise and task-aware dynamic routers.

A router pools its input, applies one 1x1 convolution (a matmul on the
pooled vector) and emits two heads of per-channel scores: a sigmoid head
weighting the primary task's features and a softmax head (over channels)
weighting a secondary task's features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import ShapeError, Tensor, concat, global_avg_pool, sigmoid, softmax

TASK_IDS = {"seg": 0, "det3d": 1, "depth": 2}


@dataclass
class RoutingScores:
    g_primary: Tensor
    g_secondary: Tensor

    def __post_init__(self):
        if self.g_primary.shape != self.g_secondary.shape or self.g_primary.ndim != 1:
            raise ShapeError(f"routing heads must be equal-length vectors, got "
                             f"{self.g_primary.shape} and {self.g_secondary.shape}")

    @property
    def channels(self) -> int:
        return self.g_primary.shape[0]

    @classmethod
    def pass_through(cls, channels: int) -> "RoutingScores":
        return cls(Tensor(np.ones(channels)), Tensor(np.zeros(channels)))


@dataclass
class TaskEmbedding:
    task_id: int
    emb: Tensor


@dataclass
class RouterParams:
    """One 1x1 conv from the pooled descriptor (plus task embedding) to 2C scores."""

    weight: Tensor  # (2 * out_channels, in_channels + emb_channels)
    bias: Tensor  # (2 * out_channels,)
    out_channels: int
    in_channels: int
    emb_channels: int = 0

    def __post_init__(self):
        expected = (2 * self.out_channels, self.in_channels + self.emb_channels)
        if self.weight.shape != expected:
            raise ShapeError(f"router weight {self.weight.shape} != {expected}")
        if self.bias.shape != (2 * self.out_channels,):
            raise ShapeError(f"router bias {self.bias.shape} != ({2 * self.out_channels},)")

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, task_aware: bool = False) -> "RouterParams":
        emb = in_channels // 8 if task_aware else 0
        if task_aware and in_channels % 8:
            raise ShapeError(f"task-aware routing needs channels divisible by 8, got {in_channels}")
        return cls(Tensor(np.zeros((2 * out_channels, in_channels + emb)), requires_grad=True),
                   Tensor(np.zeros(2 * out_channels), requires_grad=True),
                   out_channels, in_channels, emb)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class TaskEmbedder:
    """Shared 1x1 projection of a one-hot task id to a C/8 embedding."""

    proj: Tensor  # (C/8, n_tasks)
    num_tasks: int = field(init=False)

    def __post_init__(self):
        self.num_tasks = self.proj.shape[1]

    @property
    def width(self) -> int:
        return self.proj.shape[0]

    def __call__(self, task_id: int) -> TaskEmbedding:
        if not 0 <= task_id < self.num_tasks:
            raise ShapeError(f"task id {task_id} outside [0, {self.num_tasks})")
        onehot = np.zeros(self.num_tasks)
        onehot[task_id] = 1.0
        return TaskEmbedding(task_id, self.proj @ Tensor(onehot))


def _pooled(x: Tensor) -> Tensor:
    return global_avg_pool(x).reshape(x.shape[0])


def _heads(desc_primary: Tensor, desc_secondary: Tensor, params: RouterParams) -> RoutingScores:
    C = params.out_channels
    Wp, Ws = params.weight[:C], params.weight[C:]
    zp = Wp @ desc_primary + params.bias[:C]
    zs = Ws @ desc_secondary + params.bias[C:]
    return RoutingScores(sigmoid(zp), softmax(zs, axis=0))


def channel_router(x: Tensor, params: RouterParams) -> RoutingScores:
    """{sigmoid, softmax}(conv1x1(GAP(x)))."""
    if params.emb_channels:
        raise ShapeError("channel_router got task-aware parameters; use task_router")
    if x.shape[0] != params.in_channels:
        raise ShapeError(f"router expects {params.in_channels} channels, input has {x.shape[0]}")
    v = _pooled(x)
    return _heads(v, v, params)


def task_router(x: Tensor, emb_primary: TaskEmbedding, emb_secondary: TaskEmbedding,
                params: RouterParams) -> RoutingScores:
    """Router whose sigmoid head sees GAP(x) + primary embedding and softmax head
    sees GAP(x) + secondary embedding (concatenated along channels)."""
    if x.shape[0] != params.in_channels:
        raise ShapeError(f"router expects {params.in_channels} channels, input has {x.shape[0]}")
    expected = params.in_channels // 8
    for e in (emb_primary, emb_secondary):
        if e.emb.shape != (expected,) or params.emb_channels != expected:
            raise ShapeError(f"task embedding length {e.emb.shape[0]} != C/8 = {expected}")
    v = _pooled(x)
    return _heads(concat([v, emb_primary.emb]), concat([v, emb_secondary.emb]), params)


def route_features(F_m: Tensor, F_a: Tensor, scores: RoutingScores) -> Tensor:
    """g_primary (x) F_m + g_secondary (x) F_a with per-channel broadcasting."""
    return route_many(F_m, [F_a], scores.g_primary, [scores.g_secondary])


def route_many(F_m: Tensor, secondaries: Sequence[Tensor], g_primary: Tensor,
               g_secondaries: Sequence[Tensor]) -> Tensor:
    C = F_m.shape[0]
    if g_primary.shape != (C,):
        raise ShapeError(f"score length {g_primary.shape} != feature channels {C}")
    out = g_primary.reshape(C, 1, 1) * F_m
    for F_a, g in zip(secondaries, g_secondaries, strict=True):
        if F_a.shape != F_m.shape:
            raise ShapeError(f"route_features: {F_m.shape} vs {F_a.shape}")
        if g.shape != (C,):
            raise ShapeError(f"score length {g.shape} != feature channels {C}")
        out = out + g.reshape(C, 1, 1) * F_a
    return out


def split_context(M: Tensor) -> tuple[Tensor, Tensor]:
    """Halve a tensor along channels."""
    C2 = M.shape[0]
    if C2 % 2:
        raise ShapeError(f"split_context needs an even channel count, got {C2}")
    return M[:C2 // 2], M[C2 // 2:]
