"""Executable acceptance suite: every check returns measured quantities plus a
pass flag, collected into a JSON-serializable report."""

from __future__ import annotations

import itertools
import json
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import dynamic_ops
from ..branches import BranchConfig, ConvParams, crop_roi
from ..dynamic_ops import DR1ConvLayer, Rank1Factors, induced_position_kernels, oracle_dense_dynamic_conv
from ..geometry import (
    Box3D,
    CameraIntrinsics,
    backproject,
    backproject_t,
    box_corners_t,
    project,
    relative_crop_params,
    update_intrinsics,
    yaw_to_alpha,
)
from ..heads import (
    AttentionBasis,
    Decoded3D,
    DepthHeadParams,
    Embedding3D,
    LossWeights,
    PanopticWeights,
    SegEmbedding,
    attention_maps,
    attention_param_counts,
    corner_loss,
    decode_3d_tensors,
    depth_head,
    factored_attention_mask,
    panoptic_logits,
    total_loss,
)
from ..metrics import PanopticMap, depth_metrics, nds, panoptic_quality
from ..numerics import (
    Tensor,
    aligned_upsample_matrix,
    atan2,
    avg_pool,
    bce_with_logits,
    clamp,
    concat,
    conv2d,
    cos,
    cross_entropy,
    exp,
    global_avg_pool,
    grad_check,
    l1_loss,
    linear_interp_matrix,
    log,
    log_softmax,
    matmul,
    mean,
    power,
    relu,
    resample,
    sigmoid,
    silu,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    tabs,
    tsum,
    upsample2x_aligned,
)
from ..routing import RouterParams, TaskEmbedding, channel_router, route_many, task_router

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    criterion: int
    passed: bool
    seconds: float
    details: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class VerificationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_jsonable)

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        data = json.loads(text)
        return cls([CheckResult(**c) for c in data["checks"]])

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} criterion {c.criterion:>2} {c.name} ({c.seconds:.1f}s)"
                + (f": {c.error}" if c.error else "") for c in self.checks]


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    got, ref = np.asarray(got, float), np.asarray(ref, float)
    scale = max(float(np.abs(ref).max(initial=0.0)), 1e-300)
    return float(np.abs(got - ref).max(initial=0.0) / scale)


# -- criterion 1 ------------------------------------------------------------------------

def check_rank1_equivalence(seeds: int = 20) -> dict:
    start = time.perf_counter()
    lin_err = conv_err = conv3_err = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        n_out, n_in = rng.integers(2, 17, size=2)
        W = rng.standard_normal((n_out, n_in))
        x, a, b = rng.standard_normal(n_in), rng.standard_normal(n_in), rng.standard_normal(n_out)
        got = dynamic_ops.dr1_linear(W, x, a, b).data
        lin_err = max(lin_err, _rel_err(got, (W * np.outer(b, a)) @ x))

        C = int(rng.integers(2, 17))
        H, Wd = (int(v) for v in rng.integers(2, 9, size=2))
        for k in (1, 3):
            X, A, B = (rng.standard_normal((C, H, Wd)) for _ in range(3))
            Wk = rng.standard_normal((C, C, k, k))
            got = dynamic_ops.dr1conv(Tensor(X), Rank1Factors(Tensor(A), Tensor(B)), DR1ConvLayer(Tensor(Wk))).data
            ref = oracle_dense_dynamic_conv(X, induced_position_kernels(Wk, A, B))
            if k == 1:
                conv_err = max(conv_err, _rel_err(got, ref))
            else:
                conv3_err = max(conv3_err, _rel_err(got, ref))
    seconds = time.perf_counter() - start
    return {"passed": lin_err < 1e-10 and conv_err < 1e-10 and conv3_err < 1e-10 and seconds < 5.0,
            "dr1_linear_max_rel_err": lin_err, "dr1conv_1x1_max_rel_err": conv_err,
            "dr1conv_3x3_max_rel_err": conv3_err, "runtime_s": seconds}


# -- criterion 2 ---------------------------------------------------------------------------

def check_degeneracy(seeds: int = 5) -> dict:
    from .model import ModelConfig, Network

    unit_err = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        C, H, W = 8, 9, 7
        X = Tensor(rng.standard_normal((C, H, W)))
        w = Tensor(rng.standard_normal((C, C, 3, 3)))
        bias = Tensor(rng.standard_normal(C))
        got = dynamic_ops.dr1conv(X, Rank1Factors.ones(X.shape), DR1ConvLayer(w, bias)).data
        unit_err = max(unit_err, float(np.abs(got - conv2d(X, w, bias, pad=1).data).max()))

    route_err = 0.0
    rng = np.random.default_rng(0)
    image = rng.uniform(0.0, 1.0, size=(3, 128, 256))
    tasks = ("seg", "det3d", "depth")
    frozen = Network(ModelConfig(tasks=tasks, routing="frozen"), seed=0).forward(image)
    plain = Network(ModelConfig(tasks=tasks, routing="none"), seed=0).forward(image)
    for t in tasks:
        route_err = max(route_err, float(np.abs(frozen.basis[t].data - plain.basis[t].data).max()))
        for level in frozen.factors[t]:
            for attr in ("A", "B"):
                a = getattr(frozen.factors[t][level], attr).data
                b = getattr(plain.factors[t][level], attr).data
                route_err = max(route_err, float(np.abs(a - b).max()))
    return {"passed": unit_err <= 1e-12 and route_err <= 1e-12,
            "unit_factor_max_abs_err": unit_err, "frozen_routing_max_abs_err": route_err}


# -- criterion 3 ----------------------------------------------------------------------------

def _signed(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _probe(out: Tensor, rng) -> Tensor:
    # random fixed linear functional makes any output a scalar
    return tsum(out * rng.standard_normal(out.shape)) if out.ndim else out


def _op_cases():
    """name -> builder(rng) -> (fn, inputs); inputs avoid the kinks of nonsmooth ops."""
    def unary(fn, sampler):
        return lambda rng: (fn, [Tensor(sampler(rng))])

    normal = lambda rng: rng.standard_normal((3, 4))  # noqa: E731
    positive = lambda rng: rng.uniform(0.3, 2.0, size=(3, 4))  # noqa: E731
    away = lambda rng: _signed(rng, (3, 4))  # noqa: E731

    cases = {
        "add": lambda rng: (lambda a, b: a + b, [Tensor(normal(rng)), Tensor(rng.standard_normal(4))]),
        "sub": lambda rng: (lambda a, b: a - b, [Tensor(normal(rng)), Tensor(normal(rng))]),
        "mul": lambda rng: (lambda a, b: a * b, [Tensor(normal(rng)), Tensor(rng.standard_normal((3, 1)))]),
        "div": lambda rng: (lambda a, b: a / b, [Tensor(normal(rng)), Tensor(away(rng))]),
        "neg": unary(lambda a: -a, normal),
        "power": unary(lambda a: power(a, 2.5), positive),
        "exp": unary(exp, normal),
        "log": unary(log, positive),
        "sqrt": unary(sqrt, positive),
        "sin": unary(sin, normal),
        "cos": unary(cos, normal),
        "atan2": lambda rng: (atan2, [Tensor(away(rng)), Tensor(away(rng))]),
        "abs": unary(tabs, away),
        "relu": unary(relu, away),
        "sigmoid": unary(sigmoid, normal),
        "silu": unary(silu, normal),
        "softplus": unary(softplus, normal),
        "clamp": unary(lambda a: clamp(a, -3.0, 3.0),
                       lambda rng: rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 2.5, (3, 4))),
        "sum": unary(lambda a: tsum(a, axis=1), normal),
        "mean": unary(lambda a: mean(a, axis=0, keepdims=True), normal),
        "reshape": unary(lambda a: a.reshape(2, 6), normal),
        "transpose": unary(lambda a: a.T, normal),
        "getitem": unary(lambda a: a[1:, ::2], normal),
        "getitem_fancy": unary(lambda a: a[np.array([0, 2, 0]), np.array([1, 1, 3])], normal),
        "concat": lambda rng: (lambda a, b: concat([a, b], axis=1), [Tensor(normal(rng)), Tensor(normal(rng))]),
        "stack": lambda rng: (lambda a, b: stack([a, b], axis=0), [Tensor(normal(rng)), Tensor(normal(rng))]),
        "matmul": lambda rng: (matmul, [Tensor(normal(rng)), Tensor(rng.standard_normal((4, 5)))]),
        "matvec": lambda rng: (matmul, [Tensor(normal(rng)), Tensor(rng.standard_normal(4))]),
        "softmax": unary(lambda a: softmax(a, axis=0), normal),
        "log_softmax": unary(lambda a: log_softmax(a, axis=1), normal),
        "conv2d": lambda rng: (lambda x, w, b: conv2d(x, w, b, stride=2, pad=1),
                               [Tensor(rng.standard_normal((3, 7, 6))), Tensor(rng.standard_normal((4, 3, 3, 3))),
                                Tensor(rng.standard_normal(4))]),
        "avg_pool": unary(lambda a: avg_pool(a, 2), lambda rng: rng.standard_normal((2, 4, 6))),
        "global_avg_pool": unary(global_avg_pool, lambda rng: rng.standard_normal((3, 4, 5))),
        "resample": unary(lambda a: resample(a, linear_interp_matrix(np.linspace(-1.5, 4.5, 7), 4, True),
                                             linear_interp_matrix(np.linspace(0, 4, 3), 5)),
                          lambda rng: rng.standard_normal((2, 4, 5))),
        "upsample2x_aligned": unary(upsample2x_aligned, lambda rng: rng.standard_normal((2, 3, 4))),
        "l1_loss": lambda rng: (_bind(l1_loss, np.zeros((3, 4)), (rng.uniform(size=(3, 4)) > 0.3) + 0.0),
                                [Tensor(away(rng))]),
        "cross_entropy": lambda rng: (lambda z: cross_entropy(z, np.array([[0, 2, -1], [1, 1, 0]])),
                                      [Tensor(rng.standard_normal((3, 2, 3)))]),
        "bce_with_logits": lambda rng: (_bind(bce_with_logits, rng.uniform(size=(3, 4)) > 0.5),
                                        [Tensor(normal(rng))]),
        "dr1_linear": lambda rng: (dynamic_ops.dr1_linear,
                                   [Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal(3)),
                                    Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(4))]),
        "dr1conv": lambda rng: (lambda x, a, b, w: dynamic_ops.dr1conv(x, Rank1Factors(a, b), DR1ConvLayer(w)),
                                [Tensor(rng.standard_normal((3, 5, 4))) for _ in range(3)]
                                + [Tensor(rng.standard_normal((3, 3, 3, 3)))]),
        "dense_merge_level": lambda rng: (
            lambda p, f, a, b, rw, w: dynamic_ops.dense_merge_level(p, f, Rank1Factors(a, b), rw, DR1ConvLayer(w)),
            [Tensor(rng.standard_normal((4, 5, 6))), Tensor(rng.standard_normal((3, 3, 3))),
             Tensor(rng.standard_normal((3, 5, 6))), Tensor(rng.standard_normal((3, 5, 6))),
             Tensor(rng.standard_normal((3, 4, 3, 3))), Tensor(rng.standard_normal((3, 3, 3, 3)))]),
        "channel_router": lambda rng: (
            lambda x, w, b: _scores_sum(channel_router(x, RouterParams(w, b, 4, 3))),
            [Tensor(rng.standard_normal((3, 4, 4))), Tensor(rng.standard_normal((8, 3))),
             Tensor(rng.standard_normal(8))]),
        "task_router": lambda rng: (
            lambda x, w, b, e1, e2: _scores_sum(task_router(x, TaskEmbedding(0, e1), TaskEmbedding(1, e2),
                                                            RouterParams(w, b, 4, 8, 1))),
            [Tensor(rng.standard_normal((8, 3, 3))), Tensor(rng.standard_normal((8, 9))),
             Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(1)), Tensor(rng.standard_normal(1))]),
        "route_many": lambda rng: (
            lambda f, a1, a2, g, s1, s2: route_many(f, [a1, a2], g, [s1, s2]),
            [Tensor(rng.standard_normal((3, 2, 2))) for _ in range(3)] + [Tensor(rng.uniform(size=3))
                                                                        for _ in range(3)]),
        "crop_roi": lambda rng: (lambda f: crop_roi(f, (5.0, 3.0, 60.0, 41.0), out_size=7, stride=8),
                                 [Tensor(rng.standard_normal((2, 6, 8)))]),
        "factored_attention_mask": lambda rng: (
            lambda R, t, s, U, V: factored_attention_mask(R, SegEmbedding(t, s), AttentionBasis(U, V)),
            [Tensor(rng.standard_normal((3, 28, 28))), Tensor(rng.standard_normal(12)),
             Tensor(rng.standard_normal(16)), Tensor(rng.standard_normal((4, 4, 14))),
             Tensor(rng.standard_normal((4, 4, 14)))]),
        "panoptic_logits": lambda rng: (
            lambda F, ws, wt: panoptic_logits(F, PanopticWeights(ws, wt)),
            [Tensor(rng.standard_normal((4, 3, 5))), Tensor(rng.standard_normal((4, 2))),
             Tensor(rng.standard_normal((4, 3)))]),
        "decode_3d": lambda rng: (_decode_fn, [Tensor(np.r_[rng.standard_normal(2) * 3, rng.uniform(8, 30),
                                                             rng.standard_normal(5) * 0.5, rng.standard_normal(2)]),
                                               Tensor(rng.standard_normal((3, 4, 4))),
                                               Tensor(rng.standard_normal(3))]),
        "corner_loss": lambda rng: (_corner_fn(rng), [Tensor(rng.uniform(-3, 3, 3) + [0, 0, 20]),
                                                      Tensor(rng.uniform(0.5, 4.0, 3)),
                                                      Tensor(rng.uniform(-3, 3)),
                                                      Tensor(rng.standard_normal(3))]),
        "depth_head": lambda rng: (
            lambda F, w1, w2, w3, b3: depth_head(F, DepthHeadParams([ConvParams(w1), ConvParams(w2),
                                                                     ConvParams(w3, b3)])),
            [Tensor(rng.standard_normal((3, 2, 3))), Tensor(rng.standard_normal((4, 3, 3, 3))),
             Tensor(rng.standard_normal((4, 4, 3, 3))), Tensor(rng.standard_normal((1, 4, 3, 3)) * 0.1),
             Tensor(np.array([20.0]))]),
        "backproject": lambda rng: (lambda u, v, z: backproject_t(CameraIntrinsics(200, 210, 128, 51), u, v, z),
                                    [Tensor(rng.uniform(0, 256)), Tensor(rng.uniform(0, 128)),
                                     Tensor(rng.uniform(1, 50))]),
        "box_corners": lambda rng: (box_corners_t, [Tensor(rng.standard_normal(3)),
                                                    Tensor(rng.uniform(0.5, 4, 3)), Tensor(rng.uniform(-3, 3))]),
        "total_loss": lambda rng: (lambda *c: total_loss(dict(zip(("ctr", "dim", "ori", "loc", "attr", "mask",
                                                                   "pano", "depth"), c))),
                                   [Tensor(rng.uniform(0.1, 2.0)) for _ in range(8)]),
    }
    return cases


def _bind(fn, *fixed):
    # fixed trailing arguments drawn once, outside the evaluated closure
    return lambda x: fn(x, *fixed)


def _scores_sum(scores) -> Tensor:
    return concat([scores.g_primary, scores.g_secondary])


def _decode_fn(vec, R, w_z):
    d = decode_3d_tensors(Embedding3D(vec), (100.0, 60.0), CameraIntrinsics(200, 200, 128, 51), R, w_z)
    return concat([d.center, d.dims, d.alpha.reshape(1)])


def _corner_fn(rng):
    gt = Box3D(tuple(rng.uniform(-3, 3, 3) + [0, 0, 20]), tuple(rng.uniform(0.5, 4.0, 3)),
               float(rng.uniform(-3, 3)), int(rng.integers(3)))

    def fn(center, dims_raw, alpha, attr):
        terms = corner_loss(Decoded3D(center, exp(dims_raw), alpha, attr), gt)
        return terms.loc + terms.dim + terms.ori + terms.attr

    return fn


def _network_case(seed: int):
    from .model import ModelConfig, Network

    rng = np.random.default_rng(seed)
    net = Network(ModelConfig(tasks=("seg", "det3d", "depth"), routing="tdr",
                              branch=BranchConfig(C=8, dense_channels=8)), seed=seed)
    for name, p in net.params.items():
        if name.startswith("router."):
            p.data[...] = rng.standard_normal(p.shape) * 0.3
    image = Tensor(rng.uniform(0.0, 1.0, size=(3, 64, 128)))
    weights = {}

    def objective(*_):
        out = net.forward(image)
        terms = [out.basis[t] for t in net.config.tasks] + [e for e in out.embeddings().values()]
        terms.append(depth_head(out.basis["depth"], net.depth_head, net.config.branch.act))
        total = None
        for i, t in enumerate(terms):
            if i not in weights:
                weights[i] = rng.standard_normal(t.shape)
            v = tsum(t * weights[i])
            total = v if total is None else total + v
        return total

    # Tensors with vanishing influence (routers of 1x1 levels, say) sit below
    # the roundoff floor of an O(100) objective at eps 1e-5; their ops are
    # covered by the per-op cases.
    objective().backward()
    names = sorted(n for n, p in net.params.items() if p.grad is not None and np.abs(p.grad).max() >= 1e-2)
    picked = [names[i] for i in rng.choice(len(names), size=min(6, len(names)), replace=False)]
    net.zero_grad()
    image.grad = None
    return objective, [image] + [net.params[n] for n in picked]


def check_gradients(seeds: int = 20) -> dict:
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for name, build in _op_cases().items():
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            fn, inputs = build(rng)
            # same probe weights on every evaluation
            probed = lambda *xs: _probe(fn(*xs), np.random.default_rng(1000 + seed))  # noqa: E731
            report = grad_check(probed, inputs, eps=GRAD_EPS, tol=GRAD_TOL, max_coords=12,
                                rng=rng, name=name)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    for seed in range(seeds):
        fn, inputs = _network_case(seed)
        report = grad_check(fn, inputs, eps=GRAD_EPS, tol=GRAD_TOL, max_coords=2,
                            rng=np.random.default_rng(seed), name="network")
        worst["network"] = max(worst.get("network", 0.0), report.max_rel_error)
    seconds = time.perf_counter() - start
    failing = sorted(k for k, v in worst.items() if not v < GRAD_TOL)
    return {"passed": not failing and seconds < 60.0, "failing_ops": failing, "ops_checked": len(worst),
            "max_rel_err": max(worst.values()), "per_op": worst, "runtime_s": seconds}


# -- criterion 4 ---------------------------------------------------------------------------

def _explicit_attention_mask(R, t, s, U, V):
    D, H, W = R.shape
    K, r, S = U.shape
    proj = np.einsum("dk,dhw->khw", t.reshape(D, K), R)
    rows, cols = aligned_upsample_matrix(S, H // S), aligned_upsample_matrix(S, W // S)
    out = np.zeros((H, W))
    for k in range(K):
        Q = U[k].T @ np.diag(s.reshape(K, r)[k]) @ V[k]
        out += proj[k] * (rows @ Q @ cols.T)
    return out


def check_factored_attention(instances: int = 100) -> dict:
    err = q_err = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(1, 9))
        R = rng.standard_normal((D, 56, 56))
        t, s = rng.standard_normal(D * 4), rng.standard_normal(16)
        U, V = rng.standard_normal((4, 4, 14)), rng.standard_normal((4, 4, 14))
        basis = AttentionBasis(Tensor(U), Tensor(V))
        got = factored_attention_mask(Tensor(R), SegEmbedding(Tensor(t), Tensor(s)), basis).data
        err = max(err, float(np.abs(got - _explicit_attention_mask(R, t, s, U, V)).max()))
        Q = attention_maps(Tensor(s), basis).data
        for k in range(4):
            q_err = max(q_err, float(np.abs(Q[k] - U[k].T @ np.diag(s[4 * k:4 * k + 4]) @ V[k]).max()))
    counts = attention_param_counts()
    return {"passed": err < 1e-10 and q_err < 1e-10 and counts == (16, 784),
            "mask_max_abs_err": err, "attention_max_abs_err": q_err,
            "factored_params": counts[0], "full_params": counts[1]}


# -- criterion 5 ---------------------------------------------------------------------------

def check_geometry(draws: int = 1000) -> dict:
    rng = np.random.default_rng(0)
    trip = upd = 0.0
    for _ in range(draws):
        K = CameraIntrinsics(*rng.uniform(100, 1500, 2), *rng.uniform(0, 800, 2))
        p = np.array([rng.uniform(-20, 20), rng.uniform(-5, 5), rng.uniform(0.5, 80)])
        uv = project(K, p)
        trip = max(trip, float(np.abs(np.asarray(backproject(K, uv, p[2])) - p).max()))
        # augmentation draw (upscaling crop) and a plain downscale in [0.5, 1]
        crop = relative_crop_params(rng, (900, 1600), 0.5, 1.0)[:3]
        plain = (rng.uniform(0.5, 1.0), rng.uniform(0, 400), rng.uniform(0, 200))
        for s, x0, y0 in (crop, plain):
            K2 = update_intrinsics(K, s, x0, y0)
            expected = np.array([s * uv[0] - x0, s * uv[1] - y0])
            upd = max(upd, float(np.abs(np.asarray(project(K2, p)) - expected).max()))
    return {"passed": trip < 1e-10 and upd < 1e-10, "round_trip_max_abs_err": trip,
            "intrinsics_update_max_abs_err": upd, "draws": draws}


# -- criterion 6 ---------------------------------------------------------------------------

ZERO_TERM = 1e-9  # float round-off in the alpha -> yaw conversion stays far below this


def check_corner_disentanglement(seeds: int = 50) -> dict:
    bad = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        gt = Box3D((rng.uniform(-10, 10), rng.uniform(0, 2), rng.uniform(5, 40)),
                   tuple(rng.uniform(0.5, 5.0, 3)), float(rng.uniform(-np.pi, np.pi)))
        alpha = yaw_to_alpha(gt.yaw, gt.center)
        for group in ("loc", "dim", "ori"):
            center, dims, a = np.array(gt.center), np.array(gt.dims), alpha
            if group == "loc":
                center = center + rng.normal(0.0, 0.5, 3)
            elif group == "dim":
                dims = dims * np.exp(rng.normal(0.0, 0.2, 3))
            else:
                a = a + rng.choice([-1, 1]) * rng.uniform(0.1, 1.0)
            terms = corner_loss(Decoded3D(Tensor(center), Tensor(dims), Tensor(a), Tensor(np.zeros(0))), gt)
            nonzero = {k for k in ("loc", "dim", "ori") if getattr(terms, k).item() > ZERO_TERM}
            if nonzero != {group}:
                bad.append({"seed": seed, "group": group, "nonzero": sorted(nonzero)})
    return {"passed": not bad, "violations": bad, "cases": 3 * seeds}


# -- criterion 7 ---------------------------------------------------------------------------

def exhaustive_pq(pred: PanopticMap, gt: PanopticMap, things, stuff) -> tuple[float, float, float]:
    """Every (gt, pred) segment pair scored from a joint-label histogram; all
    pairs above IoU 0.5 count, and uniqueness is asserted rather than assumed."""
    def labels(m):
        keys = m.class_map.astype(np.int64) * 100000 + m.instance_map
        return keys.ravel()
    g, p = labels(gt), labels(pred)
    g_ids, g_inv = np.unique(g, return_inverse=True)
    p_ids, p_inv = np.unique(p, return_inverse=True)
    joint = np.zeros((g_ids.size, p_ids.size))
    np.add.at(joint, (g_inv, p_inv), 1)
    g_area, p_area = joint.sum(1), joint.sum(0)
    matches = []
    for i, j in itertools.product(range(g_ids.size), range(p_ids.size)):
        if g_ids[i] // 100000 != p_ids[j] // 100000:
            continue
        iou = joint[i, j] / (g_area[i] + p_area[j] - joint[i, j])
        if iou > 0.5:
            matches.append((i, j, iou))
    if len({m[0] for m in matches}) != len(matches) or len({m[1] for m in matches}) != len(matches):
        raise AssertionError("a segment matched twice")
    tp = len(matches)
    fp, fn = p_ids.size - tp, g_ids.size - tp
    iou_sum = sum(m[2] for m in matches)
    denom = tp + 0.5 * fp + 0.5 * fn
    return iou_sum / denom, (iou_sum / tp if tp else 0.0), tp / denom


def _random_panoptic(rng, size=8, things=(2, 3), stuff=(0, 1)) -> PanopticMap:
    cls = rng.choice(list(things) + list(stuff), size=(size, size))
    inst = np.where(np.isin(cls, things), rng.integers(1, 4, size=(size, size)), 0)
    return PanopticMap(cls, inst)


def _blocky_panoptic(rng, things=(2, 3)) -> PanopticMap:
    cls = np.zeros((8, 8), int)
    cls[4:] = 1
    inst = np.zeros((8, 8), int)
    for i in range(1, 4):
        r, c = rng.integers(0, 6, size=2)
        h, w = rng.integers(2, 4, size=2)
        cls[r:r + h, c:c + w] = things[i % 2]
        inst[r:r + h, c:c + w] = i
    return PanopticMap(cls, inst)


def _loop_depth(pred, gt, valid):
    n = 0
    abs_rel = sq = 0.0
    d = [0, 0, 0]
    for p, g, v in zip(pred.ravel(), gt.ravel(), valid.ravel()):
        if not v:
            continue
        n += 1
        abs_rel += abs(p - g) / g
        sq += (p - g) ** 2
        ratio = max(p / g, g / p)
        for k in range(3):
            d[k] += ratio < 1.25 ** (k + 1)
    return [abs_rel / n, d[0] / n, d[1] / n, d[2] / n, math.sqrt(sq / n)]


def check_metrics(trials: int = 200) -> dict:
    things, stuff = (2, 3), (0, 1)
    rng = np.random.default_rng(0)
    ident = panoptic_quality(*(2 * [_blocky_panoptic(rng)]), things, stuff)
    pq_err = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        gt = _blocky_panoptic(rng) if trial % 2 else _random_panoptic(rng)
        seg = gt.instance_map == 1
        if trial % 2 and seg.any():
            # shift one segment by a pixel, exposing road underneath
            pred_cls, pred_inst = gt.class_map.copy(), gt.instance_map.copy()
            pred_cls[seg], pred_inst[seg] = 1, 0
            shifted = np.roll(seg, 1, axis=int(rng.integers(2)))
            pred_cls[shifted], pred_inst[shifted] = gt.class_map[seg][0], 1
            pred = PanopticMap(pred_cls, pred_inst)
        else:
            pred = _random_panoptic(rng)
        res = panoptic_quality(pred, gt, things, stuff)
        oracle = exhaustive_pq(pred, gt, things, stuff)
        pq_err = max(pq_err, *(abs(a - b) for a, b in zip((res.pq, res.sq, res.rq), oracle)))

    nds_one = nds(1.0, [0.0] * 5)
    nds_ex = nds(0.4, [0.5, 0.2, 0.1, 0.3, 0.0])

    depth_err = 0.0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        gt_d = rng.uniform(1, 100, (6, 7))
        pred_d = gt_d * rng.uniform(0.5, 1.6, (6, 7))
        valid = rng.uniform(size=(6, 7)) > 0.3
        valid[0, 0] = True
        m = depth_metrics(pred_d, gt_d, valid)
        got = [m.abs_rel, m.delta1, m.delta2, m.delta3, m.rmse]
        depth_err = max(depth_err, max(abs(a - b) for a, b in zip(got, _loop_depth(pred_d, gt_d, valid))))
    gt_d = np.random.default_rng(0).uniform(1, 100, (16, 16))
    scaled = depth_metrics(1.3 * gt_d, gt_d)
    checks = {
        "pq_identity": ident.pq == 1.0 and ident.sq == 1.0 and ident.rq == 1.0,
        "pq_vs_exhaustive": pq_err < 1e-12,
        "nds_perfect": nds_one == 1.0,
        "nds_worked_example": abs(nds_ex - 0.59) < 1e-12,
        "depth_vs_loop": depth_err < 1e-12,
        "depth_scaled_1_3": abs(scaled.abs_rel - 0.3) < 1e-12 and scaled.delta1 == 0.0 and scaled.delta2 == 1.0,
    }
    return {"passed": all(checks.values()), **checks, "pq_max_abs_err": pq_err, "nds_worked_example_value": nds_ex,
            "depth_max_abs_err": depth_err, "abs_rel_scaled": scaled.abs_rel}


# -- criterion 8 ---------------------------------------------------------------------------

def check_loss_weights(trials: int = 100) -> dict:
    w = LossWeights()
    only_dim = total_loss({"dim": 1.0})
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        c = dict(zip(("fcos", "ctr", "dim", "ori", "loc", "attr", "mask", "pano", "depth"), rng.uniform(0, 10, 9)))
        ref = (c["fcos"] + 0.4 * (c["ctr"] + 2.0 * c["dim"] + c["ori"] + 0.5 * c["loc"] + c["attr"])
               + c["mask"] + c["pano"] + c["depth"])
        worst = max(worst, abs(total_loss(c) - ref) / ref)
    checks = {"defaults": (w.lambda_3d, w.alpha, w.beta) == (0.4, 2.0, 0.5), "only_dim_is_0.8": only_dim == 0.8,
              "zero": total_loss({}) == 0.0, "random_vs_arithmetic": worst < 1e-15}
    return {"passed": all(checks.values()), **checks, "max_rel_err": worst}


# -- criterion 9 ---------------------------------------------------------------------------

def window_violations(losses, window: int = 50) -> list[int]:
    losses = np.asarray(losses)
    return [i for i in range(len(losses) - window) if not losses[i + window] < losses[i]]


def check_toy_training(steps: int = 200, cotrain_steps: int = 20) -> dict:
    from .train import OVERFIT_LR, TrainConfig, train_toy

    details = {}
    ok = True
    for task, lr in OVERFIT_LR.items():
        res = train_toy(TrainConfig(tasks=(task,), steps=steps, lr=lr))
        viol = window_violations(res.losses)
        details[task] = {"first": float(res.losses[0]), "last": float(res.losses[-1]),
                         "window_violations": len(viol), "lr": lr, "steps": steps}
        ok &= not viol and steps <= 500

    tasks = ("seg", "det3d", "depth")
    res = train_toy(TrainConfig(tasks=tasks, steps=cotrain_steps, routing="tdr"))
    finite = all(math.isfinite(v) for row in res.trace for k, v in row.items()
                 if k in ("total", "mask", "pano", "ctr", "dim", "ori", "loc", "attr", "depth"))
    shapes = {b: {k: list(v.shape) for k, v in arrs.items()} for b, arrs in res.routing.items()}
    levels = len(res.config.branch.levels)
    D = res.config.branch.dense_channels
    shape_ok = (shapes.get("instance", {}).get("primary") == [3, levels, 2 * D]
                and shapes.get("dense", {}).get("primary") == [3, levels, D])
    details["cotrain"] = {"finite": finite, "routing_shapes": shapes, "steps": cotrain_steps}

    a = train_toy(TrainConfig(tasks=("seg", "depth"), steps=5, routing="frozen"))
    b = train_toy(TrainConfig(tasks=("seg", "depth"), steps=5, routing="none"))
    trace_diff = float(np.abs(a.losses - b.losses).max())
    details["frozen_vs_none_trace_max_abs_diff"] = trace_diff
    return {"passed": bool(ok and finite and shape_ok and trace_diff <= 1e-9), **details}


# -- criterion 10 --------------------------------------------------------------------------

def check_performance(repeats: int = 3) -> dict:
    from .bench import bench_dr1conv

    start = time.perf_counter()
    res = bench_dr1conv(64, 128, 128, 3, repeats)
    seconds = time.perf_counter() - start
    return {"passed": res.speedup >= 5.0 and seconds < 120.0 and res.max_abs_diff < 1e-9,
            "speedup": res.speedup, "dr1conv_median_s": res.dr1conv_median_s,
            "oracle_median_s": res.oracle_median_s, "max_abs_diff": res.max_abs_diff, "runtime_s": seconds}


CHECKS: list[tuple[int, str, Callable[[], dict]]] = [
    (1, "rank1_equivalence", check_rank1_equivalence),
    (2, "degeneracy", check_degeneracy),
    (3, "gradient_suite", check_gradients),
    (4, "factored_attention", check_factored_attention),
    (5, "geometry", check_geometry),
    (6, "corner_disentanglement", check_corner_disentanglement),
    (7, "metrics", check_metrics),
    (8, "loss_weights", check_loss_weights),
    (9, "toy_training", check_toy_training),
    (10, "performance", check_performance),
]


def run_check(criterion: int, name: str, fn: Callable[[], dict]) -> CheckResult:
    start = time.perf_counter()
    try:
        details = fn()
        passed = bool(details.pop("passed"))
        error = None
    except Exception as err:  # a crashing check is a failing check
        details, passed = {"traceback": traceback.format_exc()}, False
        error = f"{type(err).__name__}: {err}"
    details = json.loads(json.dumps(details, default=_jsonable))
    return CheckResult(name, criterion, passed, time.perf_counter() - start, details, error)


def run_verification(criteria=None) -> VerificationReport:
    """Run the selected acceptance checks (all by default)."""
    selected = [c for c in CHECKS if criteria is None or c[0] in set(criteria)]
    return VerificationReport([run_check(*c) for c in selected])
