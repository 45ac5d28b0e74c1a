"""Convolution, pooling, resampling and loss primitives on CHW tensors."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    as_tensor,
    log_softmax,
    mean,
    mul,
    softplus,
    tabs,
    tsum,
)


def _require_chw(x: Tensor, op: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected a C x H x W tensor, got shape {x.shape}")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a CHW map with an (out, in, J, K) kernel, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    _require_chw(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (out, in, J, K), got {w.shape}")
    C, H, W = x.shape
    O, Ci, J, K = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: kernel expects {Ci} input channels, input has {C}")
    if pad < 0 or stride < 1:
        raise ShapeError(f"conv2d: need pad >= 0 and stride >= 1, got pad={pad}, stride={stride}")
    if H + 2 * pad < J or W + 2 * pad < K:
        raise ShapeError(f"conv2d: padded input {H + 2 * pad}x{W + 2 * pad} smaller than kernel {J}x{K}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")

    Ho = conv_output_size(H, J, stride, pad)
    Wo = conv_output_size(W, K, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data

    def patch(j: int, k: int) -> np.ndarray:
        return xp[:, j:j + stride * (Ho - 1) + 1:stride, k:k + stride * (Wo - 1) + 1:stride].reshape(C, -1)

    # (J, K, O, C) contiguous taps; strided 2-d views miss the BLAS path
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    out = np.zeros((O, Ho * Wo))
    for j in range(J):
        for k in range(K):
            out += taps[j, k] @ patch(j, k)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(O, -1)
        gtaps = np.empty((J, K, O, C))
        gxp = np.zeros_like(xp)
        for j in range(J):
            for k in range(K):
                gtaps[j, k] = g2 @ patch(j, k).T
                gxp[:, j:j + stride * (Ho - 1) + 1:stride, k:k + stride * (Wo - 1) + 1:stride] += (
                    taps[j, k].T @ g2).reshape(C, Ho, Wo)
        gw = gtaps.transpose(2, 3, 0, 1).copy()
        gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """C x H x W -> C x 1 x 1 per-channel mean."""
    _require_chw(x, "global_avg_pool")
    return mean(x, axis=(1, 2), keepdims=True)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; extents must be divisible by k."""
    _require_chw(x, "avg_pool")
    C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {k}")
    return mean(x.reshape(C, H // k, k, W // k, k), axis=(2, 4))


# -- separable linear resampling ------------------------------------------

def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[c] = rows @ x[c] @ cols.T for fixed interpolation matrices."""
    _require_chw(x, "resample")
    if rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise ShapeError(f"resample: matrices {rows.shape}, {cols.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),), "resample")


def linear_interp_matrix(coords: np.ndarray, n: int, zero_outside: bool = False) -> np.ndarray:
    """Rows of 1-d linear interpolation weights at fractional indices ``coords``.

    Indices are clamped to [0, n-1]. With ``zero_outside`` samples below -1 or
    above n give an all-zero row (RoIAlign border rule).
    """
    coords = np.asarray(coords, dtype=np.float64)
    m = np.zeros((coords.size, n))
    for r, c in enumerate(coords):
        if zero_outside and (c < -1.0 or c > n):
            continue
        c = min(max(c, 0.0), n - 1.0)
        i0 = int(np.floor(c))
        i1 = min(i0 + 1, n - 1)
        f = c - i0
        m[r, i0] += 1.0 - f
        m[r, i1] += f
    return m


def aligned_upsample_matrix(n: int, factor: int = 2) -> np.ndarray:
    # output p sits at input coordinate p / factor: even outputs coincide
    # with the samples a stride-`factor` convolution reads
    return linear_interp_matrix(np.arange(n * factor) / factor, n)


def upsample2x_aligned(x: Tensor) -> Tensor:
    """2x linear upsampling on the grid of stride-2 downsampling.

    Output (2h, 2w) reproduces input (h, w) exactly; odd positions average
    their two neighbours, the last row/column replicates the border.
    """
    _require_chw(x, "upsample2x_aligned")
    _, H, W = x.shape
    return resample(x, aligned_upsample_matrix(H), aligned_upsample_matrix(W))


# -- losses -----------------------------------------------------------------

def l1_loss(pred: Tensor, target, weight: np.ndarray | None = None) -> Tensor:
    """Mean absolute error, optionally over the nonzero entries of ``weight``."""
    diff = tabs(pred - as_tensor(target))
    if weight is None:
        return mean(diff)
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), pred.shape)
    total = weight.sum()
    if total <= 0:
        raise ShapeError("l1_loss: weight mask selects no elements")
    return tsum(mul(diff, weight)) * (1.0 / total)


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy of (classes, ...) logits against integer targets."""
    target = np.asarray(target)
    if logits.shape[1:] != target.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    n_cls = logits.shape[0]
    flat = logits.reshape(n_cls, -1)
    t = target.reshape(-1)
    valid = np.flatnonzero(t != ignore_index)
    if valid.size == 0:
        raise ShapeError("cross_entropy: no valid targets")
    if t[valid].min() < 0 or t[valid].max() >= n_cls:
        raise ShapeError(f"cross_entropy: targets outside [0, {n_cls})")
    logp = log_softmax(flat, axis=0)
    picked = logp[t[valid], valid]
    return -mean(picked)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy, computed as softplus(x) - x * y."""
    y = np.asarray(target, dtype=np.float64)
    return mean(softplus(logits) - logits * y)
