"""Rank-1 dynamic linear and convolution operators.

A dynamic weight ``W' = W * (b a^T)`` never has to be materialized: the
input is scaled by ``a`` before the static operator and the output by ``b``
after it. For convolutions the factors are whole C x H x W maps, so every
output position gets its own effective kernel while only 2C numbers per
position are dynamic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import ShapeError, Tensor, as_tensor, conv2d, upsample2x_aligned

DEFAULT_DENSE_CHANNELS = 64


@dataclass
class Rank1Factors:
    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.shape != self.B.shape:
            raise ShapeError(f"rank-1 factors differ in shape: {self.A.shape} vs {self.B.shape}")

    @classmethod
    def ones(cls, shape) -> "Rank1Factors":
        return cls(Tensor(np.ones(shape)), Tensor(np.ones(shape)))


@dataclass
class DR1ConvLayer:
    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"DR1Conv kernel must be 4-d, got {self.weight.shape}")
        out_c, in_c, J, K = self.weight.shape
        if out_c != in_c:
            raise ShapeError(f"DR1Conv keeps channel width: kernel maps {in_c} -> {out_c}")
        if J % 2 == 0 or K % 2 == 0:
            raise ShapeError(f"DR1Conv needs odd kernel extents for same-size padding, got {J}x{K}")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def padding(self) -> tuple[int, int]:
        return (self.weight.shape[2] - 1) // 2, (self.weight.shape[3] - 1) // 2


def rank1_modulate(W: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W * outer(b, a)``."""
    W, a, b = np.asarray(W, float), np.asarray(a, float), np.asarray(b, float)
    if W.ndim != 2 or a.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(f"rank1_modulate: W {W.shape}, a {a.shape}, b {b.shape} do not agree")
    return W * np.outer(b, a)


def dr1_linear(W, x, a, b) -> Tensor:
    """Dynamic rank-1 matrix-vector product ``(W (x * a)) * b``."""
    W, x, a, b = (as_tensor(v) for v in (W, x, a, b))
    if W.ndim != 2 or x.shape != (W.shape[1],) or a.shape != x.shape or b.shape != (W.shape[0],):
        raise ShapeError(f"dr1_linear: W {W.shape}, x {x.shape}, a {a.shape}, b {b.shape} do not agree")
    return (W @ (x * a)) * b


def dr1conv(X: Tensor, factors: Rank1Factors, layer: DR1ConvLayer) -> Tensor:
    """``conv(X * A) * B`` with same-size zero padding; output shape equals X."""
    if X.shape != factors.A.shape:
        raise ShapeError(f"dr1conv: input {X.shape} vs factors {factors.A.shape}")
    if X.shape[0] != layer.channels:
        raise ShapeError(f"dr1conv: input has {X.shape[0]} channels, layer expects {layer.channels}")
    pj, pk = layer.padding
    if pj != pk:
        # conv2d pads symmetrically in both axes
        raise ShapeError("dr1conv: non-square kernels are not supported")
    return conv2d(X * factors.A, layer.weight, layer.bias, stride=1, pad=pj) * factors.B


def upsample_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Aligned 2x upsampling, cropped to ``size`` when the finer level is odd."""
    up = upsample2x_aligned(x)
    if up.shape[1:] == tuple(size):
        return up
    return up[:, :size[0], :size[1]]


def check_half_extent(fine: tuple[int, int], coarse: tuple[int, int]) -> None:
    if any((f + 1) // 2 != c for f, c in zip(fine, coarse)):
        raise ShapeError(f"coarser level {coarse} is not half of {fine} (rounding up)")


def dense_merge_level(P_l: Tensor, F_above: Tensor | None, factors: Rank1Factors,
                      reduce_weight: Tensor, layer: DR1ConvLayer,
                      reduce_bias: Tensor | None = None) -> Tensor:
    """One inverted-pyramid step: DR1Conv(conv3x3(P_l) + up2(F_above))."""
    Z = conv2d(P_l, reduce_weight, reduce_bias, stride=1, pad=reduce_weight.shape[2] // 2)
    if F_above is not None:
        check_half_extent(P_l.shape[1:], F_above.shape[1:])
        Z = Z + upsample_to(F_above, P_l.shape[1:])
    return dr1conv(Z, factors, layer)


def induced_position_kernels(W: np.ndarray, A: np.ndarray, B: np.ndarray) -> Callable[[int, int], np.ndarray]:
    """Per-position dense kernels equivalent to DR1Conv with factors (A, B).

    ``kernel(h, w)[o, i, j, k] = B[o, h, w] * W[o, i, j, k] * A[i, h + j - p, w + k - p]``.
    Returned lazily: materializing all of them costs H*W*C*C*J*K floats.
    """
    W, A, B = np.asarray(W, float), np.asarray(A, float), np.asarray(B, float)
    p = W.shape[2] // 2
    Ap = np.pad(A, ((0, 0), (p, p), (p, p)))
    J, K = W.shape[2:]

    def kernel(h: int, w: int) -> np.ndarray:
        return B[:, h, w][:, None, None, None] * W * Ap[None, :, h:h + J, w:w + K]

    return kernel


def oracle_dense_dynamic_conv(X, per_position_kernels) -> np.ndarray:
    """Brute-force position-dependent convolution with same-size padding.

    ``per_position_kernels`` is an (H, W, C_out, C_in, J, K) array or a
    callable ``(h, w) -> (C_out, C_in, J, K)``.
    """
    X = X.data if isinstance(X, Tensor) else np.asarray(X, float)
    C, H, W = X.shape
    if callable(per_position_kernels):
        kernel_at = per_position_kernels
        probe = np.asarray(kernel_at(0, 0))
    else:
        arr = np.asarray(per_position_kernels, float)
        if arr.ndim != 6 or arr.shape[:2] != (H, W):
            raise ShapeError(f"kernel array {arr.shape} does not match input extents {(H, W)}")
        kernel_at = lambda h, w: arr[h, w]  # noqa: E731
        probe = arr[0, 0]
    O, Ci, J, K = probe.shape
    if Ci != C:
        raise ShapeError(f"kernels expect {Ci} input channels, input has {C}")
    p = J // 2
    q = K // 2
    Xp = np.pad(X, ((0, 0), (p, p), (q, q)))
    out = np.empty((O, H, W))
    for h in range(H):
        for w in range(W):
            out[:, h, w] = np.tensordot(kernel_at(h, w), Xp[:, h:h + J, w:w + K], axes=3)
    return out


def dynamic_param_counts(channels: int, kernel_h: int, kernel_w: int) -> tuple[int, int]:
    """Dynamic scalars per position: (rank-1 factors, unconstrained kernel)."""
    return 2 * channels, channels * channels * kernel_h * kernel_w
