"""Minimal differentiable float64 tensor core."""

from .gradcheck import GradReport, grad_check
from .nn import (
    aligned_upsample_matrix,
    avg_pool,
    bce_with_logits,
    conv2d,
    conv_output_size,
    cross_entropy,
    global_avg_pool,
    l1_loss,
    linear_interp_matrix,
    resample,
    upsample2x_aligned,
)
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    atan2,
    clamp,
    concat,
    cos,
    div,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    tabs,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
