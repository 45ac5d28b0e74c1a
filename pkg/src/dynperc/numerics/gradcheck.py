"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class GradReport:
    op: str
    max_rel_error: float
    passed: bool
    tolerance: float


def _evaluate(f, inputs) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None, name: str = "") -> GradReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` with central differences.

    The error for each input is ``max|analytic - numeric|`` over its checked
    coordinates divided by the largest magnitude of its full analytic gradient
    or of the numeric estimates (infinity-norm relative error); the
    report carries the worst input. With ``max_coords`` only that many randomly
    chosen coordinates per input are perturbed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = rng if rng is not None else np.random.default_rng(0)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f, inputs)
            flat[i] = orig - eps
            fm = _evaluate(f, inputs)
            flat[i] = orig
            numeric[n] = (fp - fm) / (2.0 * eps)
        a_sel = a.reshape(-1)[idx]
        # normalize by the whole analytic gradient so sampled near-zero
        # coordinates do not turn roundoff into large relative errors
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(a_sel - numeric).max() / scale))
    return GradReport(op=name or getattr(f, "__name__", "f"), max_rel_error=worst,
                      passed=worst < tol, tolerance=tol)
