"""Task heads: factored-attention masks, unified panoptic layer, monocular 3D
regression with a disentangled corner loss, dense depth, and the total loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import (
    Box3D,
    CameraIntrinsics,
    alpha_to_yaw,
    backproject_t,
    box_corners,
    box_corners_t,
    yaw_to_alpha,
)
from .numerics import (
    ShapeError,
    Tensor,
    aligned_upsample_matrix,
    as_tensor,
    atan2,
    clamp,
    concat,
    cross_entropy,
    exp,
    global_avg_pool,
    matmul,
    resample,
    silu,
    sqrt,
    stack,
    tabs,
    tsum,
    upsample2x_aligned,
)

log = logging.getLogger(__name__)

NUM_BASES = 4
ATTENTION_RANK = 4
ATTENTION_SIZE = 14
MAX_DEPTH = 120.0
MIN_DEPTH = 1e-3
E3D_FIXED = 8  # c_x, c_y, z_inst, h, w, l, sin, cos


class DecodeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


# -- factored attention ---------------------------------------------------------

@dataclass
class SegEmbedding:
    t: Tensor  # D' * K projection weights
    s: Tensor  # K * rank attention factors

    @classmethod
    def split(cls, e_seg: Tensor, dense_channels: int, num_bases: int = NUM_BASES) -> "SegEmbedding":
        nt = dense_channels * num_bases
        if e_seg.shape != (nt + num_bases * ATTENTION_RANK,):
            raise ShapeError(f"seg embedding length {e_seg.shape} != {nt + num_bases * ATTENTION_RANK}")
        return cls(e_seg[:nt], e_seg[nt:])


@dataclass
class AttentionBasis:
    U: Tensor  # K x rank x 14
    V: Tensor  # K x rank x 14

    def __post_init__(self):
        if self.U.shape != self.V.shape or self.U.ndim != 3:
            raise ShapeError(f"attention bases U {self.U.shape} and V {self.V.shape} must match (K, r, S)")

    def parameters(self) -> list[Tensor]:
        return [self.U, self.V]


def attention_maps(s: Tensor, basis: AttentionBasis) -> Tensor:
    """Q_k = U_k^T diag(s_k) V_k as a sum of scaled row outer products; K x S x S."""
    K, r, _ = basis.U.shape
    if s.shape != (K * r,):
        raise ShapeError(f"attention factors {s.shape} != ({K * r},)")
    scaled = basis.U * s.reshape(K, r, 1)
    return stack([matmul(scaled[k].T, basis.V[k]) for k in range(K)])


def factored_attention_mask(R: Tensor, e_seg: SegEmbedding, basis: AttentionBasis) -> Tensor:
    """Instance mask logits from a cropped basis R (D' x S' x S')."""
    D, H, W = R.shape
    K = basis.U.shape[0]
    if e_seg.t.shape != (D * K,):
        raise ShapeError(f"projection weights {e_seg.t.shape} != ({D * K},) for D'={D}, K={K}")
    proj = matmul(e_seg.t.reshape(D, K).T, R.reshape(D, H * W)).reshape(K, H, W)
    Q = attention_maps(e_seg.s, basis)
    S = Q.shape[1]
    if H % S or W % S:
        raise ShapeError(f"crop {H}x{W} is not a multiple of the attention size {S}")
    Q_up = resample(Q, aligned_upsample_matrix(S, H // S), aligned_upsample_matrix(S, W // S))
    return tsum(proj * Q_up, axis=0)


def attention_param_counts(num_bases: int = NUM_BASES, rank: int = ATTENTION_RANK,
                           size: int = ATTENTION_SIZE) -> tuple[int, int]:
    """Per-instance attention scalars: (factored, full K x S x S attention)."""
    return num_bases * rank, num_bases * size * size


# -- panoptic layer ---------------------------------------------------------------

def aggregate_instance_embeddings(embeddings: Sequence[Tensor]) -> Tensor | None:
    """Mean of an instance's proposal embeddings; None when it has none."""
    if not embeddings:
        return None
    total = embeddings[0]
    for e in embeddings[1:]:
        total = total + e
    return total * (1.0 / len(embeddings))


@dataclass
class PanopticWeights:
    W_stuff: Tensor  # D' x C_stuff
    W_thing: Tensor | None  # D' x C_thing

    @property
    def matrix(self) -> Tensor:
        if self.W_thing is None or self.W_thing.shape[1] == 0:
            return self.W_stuff
        return concat([self.W_stuff, self.W_thing], axis=1)


def thing_weights(per_instance: Sequence[Sequence[Tensor]]) -> tuple[Tensor | None, list[int]]:
    """Stack mean embeddings into W_thing columns; also return the kept instance
    indices (instances without proposals are dropped)."""
    cols, kept = [], []
    for i, embs in enumerate(per_instance):
        mean = aggregate_instance_embeddings(list(embs))
        if mean is None:
            log.debug("instance %d has no proposals; excluded from W_thing", i)
            continue
        cols.append(mean)
        kept.append(i)
    if not cols:
        return None, kept
    return stack(cols, axis=1), kept


def panoptic_logits(F: Tensor, weights: PanopticWeights) -> Tensor:
    """Y = W_pano^T F, one logit map per stuff class and per thing instance."""
    D, H, W = F.shape
    Wp = weights.matrix
    if Wp.shape[0] != D:
        raise ShapeError(f"panoptic weights have {Wp.shape[0]} rows, basis has {D} channels")
    return matmul(Wp.T, F.reshape(D, H * W)).reshape(Wp.shape[1], H, W)


def panoptic_loss(logits: Tensor, target: np.ndarray, ignore_index: int = -1) -> Tensor:
    return cross_entropy(logits, target, ignore_index=ignore_index)


# -- monocular 3D ---------------------------------------------------------------------

@dataclass
class Embedding3D:
    """[c_x, c_y, z_inst, h, w, l, sin a, cos a, attr logits...]; h, w, l are log-sizes."""

    vec: Tensor

    def __post_init__(self):
        if self.vec.ndim != 1 or self.vec.shape[0] < E3D_FIXED:
            raise ShapeError(f"3D embedding needs at least {E3D_FIXED} entries, got {self.vec.shape}")

    @classmethod
    def from_values(cls, c_x, c_y, z_inst, dims_raw, sin_a, cos_a, attrs=()) -> "Embedding3D":
        return cls(Tensor([c_x, c_y, z_inst, *dims_raw, sin_a, cos_a, *attrs]))

    @property
    def offset(self) -> Tensor:
        return self.vec[0:2]

    @property
    def z_inst(self) -> Tensor:
        return self.vec[2]

    @property
    def dims_raw(self) -> Tensor:
        return self.vec[3:6]

    @property
    def sin_cos(self) -> Tensor:
        return self.vec[6:8]

    @property
    def attr_logits(self) -> Tensor:
        return self.vec[8:]

    @property
    def num_attributes(self) -> int:
        return self.vec.shape[0] - E3D_FIXED


@dataclass
class Decoded3D:
    center: Tensor  # (3,)
    dims: Tensor  # (h, w, l)
    alpha: Tensor  # scalar
    attr_logits: Tensor

    def to_box(self) -> Box3D:
        center = tuple(float(c) for c in self.center.data)
        attr = int(np.argmax(self.attr_logits.data)) if self.attr_logits.size else None
        return Box3D(center, tuple(float(d) for d in self.dims.data),
                     alpha_to_yaw(float(self.alpha.data), center), attr)


def instance_depth(z_inst: Tensor, R: Tensor | None, w_z: Tensor | None) -> Tensor:
    """z = z_inst + GAP(R) . w_z."""
    if R is None or w_z is None:
        return z_inst
    pooled = global_avg_pool(R).reshape(R.shape[0])
    return z_inst + tsum(pooled * w_z)


def decode_3d_tensors(e3d: Embedding3D, location: Sequence[float], K: CameraIntrinsics,
                      R: Tensor | None = None, w_z: Tensor | None = None) -> Decoded3D:
    z = instance_depth(e3d.z_inst, R, w_z)
    if not z.item() > 0:
        raise DecodeError(f"decoded depth {z.item():.4g} is not positive")
    u = e3d.offset[0] + float(location[0])
    v = e3d.offset[1] + float(location[1])
    center = backproject_t(K, u, v, z)
    sc = e3d.sin_cos
    norm = sqrt(tsum(sc * sc))
    alpha = atan2(sc[0] / norm, sc[1] / norm)
    return Decoded3D(center, exp(e3d.dims_raw), alpha, e3d.attr_logits)


def decode_3d(e3d: Embedding3D, location: Sequence[float], K: CameraIntrinsics,
              R: Tensor | None = None, w_z: Tensor | None = None) -> Box3D:
    """Box3D from a 3D embedding read at image ``location`` (pixels)."""
    return decode_3d_tensors(e3d, location, K, R, w_z).to_box()


@dataclass
class CornerTerms:
    loc: Tensor
    dim: Tensor
    ori: Tensor
    attr: Tensor | None = None


def _l1_corners(corners: Tensor, target: np.ndarray) -> Tensor:
    return tsum(tabs(corners - Tensor(target)))


def corner_loss(pred: Decoded3D, gt: Box3D) -> CornerTerms:
    """Disentangled corner L1: each group (loc, dim, ori) takes its parameters
    from the prediction and every other parameter from ground truth. Corners
    use the camera-frame box; the orientation group converts the predicted
    observation angle with the ground-truth center."""
    gt_corners = box_corners(gt)
    gt_center = Tensor(gt.center)
    gt_dims = Tensor(gt.dims)
    gt_yaw = Tensor(gt.yaw)
    loc = _l1_corners(box_corners_t(pred.center, gt_dims, gt_yaw), gt_corners)
    dim = _l1_corners(box_corners_t(gt_center, pred.dims, gt_yaw), gt_corners)
    yaw = alpha_to_yaw(pred.alpha, (gt.center[0], gt.center[1], gt.center[2]))
    ori = _l1_corners(box_corners_t(gt_center, gt_dims, yaw), gt_corners)
    attr = None
    if pred.attr_logits.size and gt.attribute is not None:
        attr = cross_entropy(pred.attr_logits.reshape(-1, 1), np.array([gt.attribute]))
    return CornerTerms(loc, dim, ori, attr)


def gt_alpha(gt: Box3D) -> float:
    return yaw_to_alpha(gt.yaw, gt.center)


# -- depth ------------------------------------------------------------------------------

@dataclass
class DepthHeadParams:
    convs: list  # three ConvParams-like objects with .weight/.bias

    def parameters(self) -> list[Tensor]:
        return [p for c in self.convs for p in c.parameters()]


def depth_head(F: Tensor, params: DepthHeadParams, activation=silu) -> Tensor:
    """Three (conv3x3 -> aligned 2x upsample) stages; 1 x 8H x 8W map in (0, 120]."""
    if len(params.convs) != 3:
        raise ShapeError(f"depth head needs three conv stages, got {len(params.convs)}")
    x = F
    for i, conv in enumerate(params.convs):
        x = conv(x)
        if i < 2:
            x = activation(x)
        x = upsample2x_aligned(x)
    return clamp(x, MIN_DEPTH, MAX_DEPTH)


# -- total loss ---------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_3d: float = 0.4
    alpha: float = 2.0
    beta: float = 0.5


LOSS_NAMES = ("fcos", "ctr", "dim", "ori", "loc", "attr", "mask", "pano", "depth")


def total_loss(components: Mapping[str, Tensor | float], weights: LossWeights = LossWeights()):
    """fcos + lambda_3d (ctr + alpha dim + ori + beta loc + attr) + mask + pano + depth.

    Missing components count as zero. Returns a Tensor when any component is
    one, otherwise a float.
    """
    unknown = set(components) - set(LOSS_NAMES)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    for name, value in components.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss component {name!r} is {v}")

    def get(name):
        return components.get(name, 0.0)

    three_d = (get("ctr") + weights.alpha * get("dim") + get("ori")
               + weights.beta * get("loc") + get("attr"))
    return (get("fcos") + weights.lambda_3d * three_d
            + get("mask") + get("pano") + get("depth"))
