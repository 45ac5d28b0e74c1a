"""Deterministic SGD loop for the toy network on synthetic scenes."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..branches import BranchConfig
from ..heads import LOSS_NAMES, LossWeights, NonFiniteLossError, total_loss
from ..metrics import depth_metrics, mean_ap, nds, panoptic_quality, pool_panoptic, tp_errors
from .model import ModelConfig, Network, routing_arrays, save_checkpoint
from .objectives import predict, scene_losses
from .scene import STUFF_CLASSES, THING_CLASSES, SceneConfig, augment_scene, gen_scene

log = logging.getLogger(__name__)


# largest fixed steps that keep single-scene overfitting monotone per task
OVERFIT_LR = {"seg": 2e-3, "det3d": 5e-5, "depth": 1e-3}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint: Path | None):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    tasks: tuple[str, ...] = ("seg",)
    steps: int = 200
    lr: float | None = None  # None: smallest OVERFIT_LR among the enabled tasks
    seed: int = 0
    branch: BranchConfig = field(default_factory=lambda: BranchConfig(C=16, dense_channels=16))
    weights: LossWeights = field(default_factory=LossWeights)
    routing: str = "tdr"
    scene_seed: int = 0
    num_scenes: int = 1  # 1 = overfit a single scene
    augment: bool = False
    max_proposals: int | None = 4
    eval_scenes: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("at least one task must be enabled")
        if self.steps < 0 or self.num_scenes < 1:
            raise ValueError("steps must be >= 0 and num_scenes >= 1")
        if self.lr is None:
            self.lr = min(OVERFIT_LR.get(t, math.inf) for t in self.tasks)
        if not 0 < self.lr < math.inf:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if isinstance(self.branch, dict):
            self.branch = BranchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in self.branch.items()})
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in self.scene.items()})
        self.model_config()  # validates tasks and routing mode

    def model_config(self) -> ModelConfig:
        return ModelConfig(tasks=self.tasks, branch=self.branch, routing=self.routing,
                           num_attributes=self.scene.num_attributes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class TrainResult:
    config: TrainConfig
    network: Network
    trace: list[dict[str, float]]
    routing: dict[str, dict[str, np.ndarray]]  # branch -> {"primary", "secondary"}: T x L x C
    metrics: dict
    checkpoint: Path | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["total"] for row in self.trace])


def _scene_for_step(cfg: TrainConfig, step: int, rng: np.random.Generator, cache: dict):
    seed = cfg.scene_seed + step % cfg.num_scenes
    if seed not in cache:
        cache[seed] = gen_scene(seed, cfg.scene)
    scene = cache[seed]
    return augment_scene(scene, rng) if cfg.augment else scene


def train_toy(cfg: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Plain SGD; one scene per step. A non-finite loss or gradient restores the
    last finite parameters, writes them out and raises TrainingAborted."""
    net = Network(cfg.model_config(), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    cache: dict = {}
    trace = []
    routing_log = {}

    for step in range(cfg.steps):
        scene = _scene_for_step(cfg, step, rng, cache)
        last_good = net.state()
        net.zero_grad()
        try:
            out = net.forward(scene.image)
            components = scene_losses(net, out, scene, cfg.max_proposals)
            loss = total_loss(components, cfg.weights)
            loss.backward()
            grads = [p.grad for p in net.parameters() if p.grad is not None]
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLossError("non-finite gradient")
        except (NonFiniteLossError, FloatingPointError) as err:
            net.load_state(last_good)
            ckpt = save_checkpoint(net, out_dir / "checkpoint", {"aborted_step": step}) if out_dir else None
            if out_dir:
                _write_trace(trace, out_dir / "trace.csv")
            raise TrainingAborted(step, str(err), ckpt) from err

        for p in net.parameters():
            if p.grad is not None:
                p.data -= cfg.lr * p.grad
        row = {"step": step, "total": float(loss.item())}
        row.update({name: float(components[name].item()) if name in components else math.nan
                    for name in LOSS_NAMES})
        trace.append(row)
        routing_log = out.routing
        if step % 50 == 0:
            log.info("step %d loss %.6f", step, row["total"])

    levels = cfg.branch.levels
    routing = {}
    for branch, blog in routing_log.items():
        gp, gs = routing_arrays(blog, cfg.tasks, levels)
        if gp is not None:
            routing[branch] = {"primary": gp, "secondary": gs}

    metrics = evaluate(net, [cfg.scene_seed + i for i in range(cfg.eval_scenes)], cfg.scene,
                       cfg.max_proposals)
    result = TrainResult(cfg, net, trace, routing, metrics)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(net, out_dir / "checkpoint", {"train_config": cfg.to_dict()})
        _write_trace(trace, out_dir / "trace.csv")
        for branch, arrays in routing.items():
            for kind, arr in arrays.items():
                np.save(out_dir / f"routing_{branch}_{kind}.npy", arr)
    return result


def _write_trace(trace: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "total", *LOSS_NAMES])
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def evaluate(net: Network, seeds, scene_config: SceneConfig | None = None,
             max_proposals: int | None = 4) -> dict:
    """Task metrics pooled over the scenes generated from ``seeds``."""
    tasks = net.config.tasks
    preds, gts = [], []
    pq_inputs, depth_pairs = [], []
    for seed in seeds:
        scene = gen_scene(seed, scene_config)
        pred = predict(net, scene, max_proposals)
        if pred.panoptic is not None:
            pq_inputs.append((pred.panoptic, scene.panoptic))
        if pred.detections is not None:
            preds.extend(pred.detections)
            gts.extend(zip(scene.boxes3d, scene.classes))
        if pred.depth is not None:
            depth_pairs.append((pred.depth[scene.valid_depth], scene.depth[scene.valid_depth]))

    metrics = {}
    if "seg" in tasks:
        pooled = pool_panoptic([panoptic_quality(p, g, THING_CLASSES, STUFF_CLASSES) for p, g in pq_inputs])
        metrics["pq"] = {name: float(getattr(pooled, name)) for name in ("pq", "sq", "rq", "pq_th", "pq_st")}
    if "det3d" in tasks:
        mAP = mean_ap(preds, gts, THING_CLASSES)
        errs = tp_errors(preds, [g for g, _ in gts])
        mAP0 = 0.0 if math.isnan(mAP) else mAP
        metrics["det3d"] = {"mAP": mAP, **errs, "NDS": nds(mAP0, list(errs.values()))}
    if "depth" in tasks:
        p = np.concatenate([d[0] for d in depth_pairs])
        g = np.concatenate([d[1] for d in depth_pairs])
        metrics["depth"] = depth_metrics(p, g)
    return metrics
