"""Toy two-branched multi-task network assembled from the library modules."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..branches import (
    BranchConfig,
    ConvParams,
    FeaturePyramid,
    InstanceBranchParams,
    InstanceLevel,
    instance_branch_forward,
    split_dynamic_tensors,
)
from ..dynamic_ops import DR1ConvLayer, Rank1Factors, dr1conv, upsample_to
from ..heads import E3D_FIXED, ATTENTION_RANK, ATTENTION_SIZE, AttentionBasis, DepthHeadParams
from ..numerics import Tensor, avg_pool, load_tensor, save_tensor
from ..routing import (
    TASK_IDS,
    RouterParams,
    RoutingScores,
    TaskEmbedder,
    channel_router,
    route_many,
    task_router,
)

TASKS = ("seg", "det3d", "depth")
ROUTING_MODES = ("none", "cdr", "tdr", "frozen")
ACT_GAIN = 2.0  # keeps activation scale roughly constant through silu/relu layers
DEPTH_UNIT = 10.0  # meters per unit of the last depth conv
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


@dataclass
class ScaledConv(ConvParams):
    """Conv whose output is multiplied by a fixed scale, so a unit-scale
    parameterization can span the metric depth range."""

    scale: float = 1.0

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return super().__call__(x, stride) * self.scale


@dataclass
class ModelConfig:
    tasks: tuple[str, ...] = ("seg",)
    branch: BranchConfig = field(default_factory=lambda: BranchConfig(C=16, dense_channels=16))
    routing: str = "tdr"
    num_stuff: int = 2
    num_attributes: int = 2
    stem_pool: int = 4
    z_prior: float = 15.0
    depth_prior: float = 20.0

    def __post_init__(self):
        if isinstance(self.branch, dict):
            self.branch = BranchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in self.branch.items()})
        self.tasks = tuple(self.tasks)
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ValueError(f"tasks must be a nonempty subset of {TASKS}, got {self.tasks}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"duplicate tasks in {self.tasks}")
        if self.routing not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")

    @property
    def dense(self) -> int:
        return self.branch.dense_channels

    def embedding_layout(self) -> dict[str, slice]:
        """Channel slices of E_l: panoptic column, projection t, factors s, 3D block."""
        D, K = self.dense, self.branch.num_bases
        sizes = [("pano", D), ("t", D * K), ("s", K * ATTENTION_RANK),
                 ("e3d", E3D_FIXED + self.num_attributes)]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def embedding_channels(self) -> int:
        return self.embedding_layout()["e3d"].stop

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    pyramid: FeaturePyramid
    instance: dict[int, InstanceLevel]
    factors: dict[str, dict[int, Rank1Factors]]
    basis: dict[str, Tensor]
    routing: dict[str, dict[str, dict[int, tuple[np.ndarray, np.ndarray]]]]

    def embeddings(self) -> dict[int, Tensor]:
        return {level: out.E for level, out in self.instance.items()}


class Network:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg, b = config, config.branch
        C, D, T = b.C, config.dense, len(config.tasks)

        self.stem = self._conv(rng, "stem", 3, C, 3, ACT_GAIN)
        self.down = {l: self._conv(rng, f"down{l}", C, C, 3, ACT_GAIN) for l in b.levels[1:]}
        tower = [self._conv(rng, f"tower{i}", C, C, 3, ACT_GAIN) for i in range(b.tower_depth)]
        ctx = 2 * D * T
        top = self._conv(rng, "top", C, ctx + cfg.embedding_channels, 3)
        # unit factors at start: DR1Conv begins close to its static convolution
        top.bias.data[:ctx] = 1.0
        lay = cfg.embedding_layout()
        top.bias.data[ctx + lay["s"].start:ctx + lay["s"].stop] = 1.0
        e3d = ctx + lay["e3d"].start
        top.bias.data[e3d + 2] = cfg.z_prior
        top.bias.data[e3d + 3:e3d + 6] = np.log([1.6, 1.8, 4.0])
        top.bias.data[e3d + 7] = 1.0
        self.instance = InstanceBranchParams(tower, top, ctx)

        self.reduce = {l: self._conv(rng, f"reduce{l}", C, D, 3) for l in b.levels}
        self.dr1 = {t: {l: DR1ConvLayer(self._param(f"dr1.{t}.{l}", _uniform(rng, (D, D, 3, 3), D * 9)))
                        for l in b.levels} for t in cfg.tasks}

        self.routers: dict[str, dict[str, dict[int, RouterParams]]] = {"instance": {}, "dense": {}}
        self.embedders: dict[str, TaskEmbedder] = {}
        if cfg.routing in ("cdr", "tdr"):
            aware = cfg.routing == "tdr"
            for branch, (cin, cout) in {"instance": (C, 2 * D), "dense": (D, D)}.items():
                for t in cfg.tasks:
                    self.routers[branch][t] = {}
                    for l in b.levels:
                        rp = RouterParams.zeros(cin, cout, task_aware=aware)
                        self._param(f"router.{branch}.{t}.{l}.w", rp.weight)
                        self._param(f"router.{branch}.{t}.{l}.b", rp.bias)
                        self.routers[branch][t][l] = rp
                if aware:
                    proj = self._param(f"taskemb.{branch}", _uniform(rng, (cin // 8, len(TASK_IDS)), 1))
                    self.embedders[branch] = TaskEmbedder(proj)

        if "seg" in cfg.tasks:
            K = b.num_bases
            self.basis = AttentionBasis(
                self._param("seg.U", _uniform(rng, (K, ATTENTION_RANK, ATTENTION_SIZE), ATTENTION_RANK)),
                self._param("seg.V", _uniform(rng, (K, ATTENTION_RANK, ATTENTION_SIZE), ATTENTION_RANK)))
            self.W_stuff = self._param("seg.W_stuff", _uniform(rng, (D, cfg.num_stuff), D))
        if "det3d" in cfg.tasks:
            self.w_z = self._param("det3d.w_z", np.zeros(D))
        if "depth" in cfg.tasks:
            widths = [D, 8, 8, 1]
            convs = [self._conv(rng, f"depth{i}", widths[i], widths[i + 1], 3, ACT_GAIN if i < 2 else 1.0)
                     for i in range(3)]
            convs[-1] = ScaledConv(convs[-1].weight, convs[-1].bias, DEPTH_UNIT)
            convs[-1].bias.data[:] = cfg.depth_prior / DEPTH_UNIT
            self.depth_head = DepthHeadParams(convs)

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = t
        return t

    def _conv(self, rng, name, cin, cout, k, gain=1.0) -> ConvParams:
        w = self._param(f"{name}.w", _uniform(rng, (cout, cin, k, k), cin * k * k, gain))
        b = self._param(f"{name}.b", np.zeros(cout))
        return ConvParams(w, b)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    # -- forward --------------------------------------------------------------

    def pyramid(self, image: np.ndarray | Tensor) -> FeaturePyramid:
        """Stand-in for backbone + FPN: pooled image, strided 3x3 convs."""
        act = self.config.branch.act
        image = image if isinstance(image, Tensor) else Tensor(image)
        x = avg_pool((image - IMAGE_MEAN) * (1.0 / IMAGE_STD), self.config.stem_pool)
        x = act(self.stem(x, stride=8 // self.config.stem_pool))
        levels = {self.config.branch.levels[0]: x}
        for l in self.config.branch.levels[1:]:
            x = act(self.down[l](x, stride=2))
            levels[l] = x
        return FeaturePyramid(levels)

    def _scores(self, branch: str, x: Tensor, task: str, level: int, channels: int):
        others = [a for a in self.config.tasks if a != task]
        mode = self.config.routing
        if mode == "frozen":
            s = RoutingScores.pass_through(channels)
            return s.g_primary, [s.g_secondary] * len(others)
        params = self.routers[branch][task][level]
        if mode == "cdr":
            s = channel_router(x, params)
            return s.g_primary, [s.g_secondary] * len(others)
        embed = self.embedders[branch]
        e_m = embed(TASK_IDS[task])
        if not others:
            return task_router(x, e_m, e_m, params).g_primary, []
        scores = [task_router(x, e_m, embed(TASK_IDS[a]), params) for a in others]
        return scores[0].g_primary, [s.g_secondary for s in scores]

    def _route(self, branch, x, task, feats, level, log):
        if self.config.routing == "none":
            return feats[task]
        C = feats[task].shape[0]
        gp, gss = self._scores(branch, x, task, level, C)
        others = [a for a in self.config.tasks if a != task]
        secondary = sum((g.data for g in gss), np.zeros(C))
        log.setdefault(task, {})[level] = (gp.data.copy(), secondary)
        return route_many(feats[task], [feats[a] for a in others], gp, gss)

    def forward(self, image) -> ForwardOutput:
        cfg = self.config
        D = cfg.dense
        tasks = cfg.tasks
        pyr = self.pyramid(image)
        inst = instance_branch_forward(pyr, self.instance, cfg.branch.act)
        routing_log = {"instance": {}, "dense": {}}

        factors = {t: {} for t in tasks}
        for level, out in inst.items():
            ctx = {t: out.M[i * 2 * D:(i + 1) * 2 * D] for i, t in enumerate(tasks)}
            for t in tasks:
                routed = self._route("instance", out.tower, t, ctx, level, routing_log["instance"])
                factors[t][level] = split_dynamic_tensors(routed)

        F = {t: None for t in tasks}
        for level in sorted(pyr, reverse=True):
            lateral = self.reduce[level](pyr[level])
            Z, Y = {}, {}
            for t in tasks:
                Z[t] = lateral if F[t] is None else lateral + upsample_to(F[t], lateral.shape[1:])
                Y[t] = dr1conv(Z[t], factors[t][level], self.dr1[t][level])
            F = {t: self._route("dense", Z[t], t, Y, level, routing_log["dense"]) for t in tasks}
        return ForwardOutput(pyr, inst, factors, F, routing_log)


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def routing_arrays(log: dict[str, dict[int, tuple[np.ndarray, np.ndarray]]], tasks, levels):
    """Stack a branch's routing log into (tasks, levels, channels) arrays."""
    if not log:
        return None, None
    gp = np.stack([np.stack([log[t][l][0] for l in levels]) for t in tasks])
    gs = np.stack([np.stack([log[t][l][1] for l in levels]) for t in tasks])
    return gp, gs


def save_checkpoint(net: Network, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    meta = {"config": net.config.to_dict(), "params": list(net.params)}
    if extra:
        meta.update(extra)
    (path / "model.json").write_text(json.dumps(meta, indent=2))
    for name, t in net.params.items():
        save_tensor(path / "params" / f"{name}.tensor", t)
    return path


def load_checkpoint(path: str | Path) -> Network:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    net = Network(ModelConfig(**meta["config"]))
    net.load_state({name: load_tensor(path / "params" / f"{name}.tensor").data for name in meta["params"]})
    return net
