"""Command line: verify, train-toy, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..metrics import write_report
from .model import TASKS


def _tasks(text: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    unknown = [t for t in tasks if t not in TASKS]
    if unknown or not tasks:
        raise argparse.ArgumentTypeError(f"tasks must be a comma list from {','.join(TASKS)}, got {text!r}")
    return tasks


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _criteria(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynperc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--criteria", type=_criteria, default=None, help="comma list, default all")
    p.add_argument("--out", type=Path, default=Path("out/verify"))

    p = sub.add_parser("train-toy", help="train the toy network on synthetic scenes")
    p.add_argument("--tasks", type=_tasks, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--routing", choices=("none", "cdr", "tdr", "frozen"), default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON TrainConfig; flags override it")
    p.add_argument("--out", type=Path, default=Path("out/train"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on generated scenes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out/eval"))

    p = sub.add_parser("bench", help="time dr1conv against the dense per-position oracle")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--hw", type=_hw, default=(128, 128))
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", type=Path, default=Path("out/bench"))
    return parser


def cmd_verify(args) -> int:
    from .verification import run_verification

    report = run_verification(args.criteria)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "verification.json").write_text(report.to_json())
    print("\n".join(report.lines()))
    print(f"report: {args.out / 'verification.json'}")
    return 0 if report.passed else 1


def _render_predictions(net, seeds, scene_config, out: Path, max_proposals) -> None:
    from .objectives import predict
    from .plotting import save_depth_pgm, save_panoptic_ppm
    from .scene import gen_scene

    for seed in seeds:
        scene = gen_scene(seed, scene_config)
        pred = predict(net, scene, max_proposals)
        if pred.panoptic is not None:
            save_panoptic_ppm(pred.panoptic, out / f"scene{seed}_panoptic.ppm")
            save_panoptic_ppm(scene.panoptic, out / f"scene{seed}_panoptic_gt.ppm")
        if pred.depth is not None:
            save_depth_pgm(pred.depth, out / f"scene{seed}_depth.pgm")
            save_depth_pgm(scene.depth, out / f"scene{seed}_depth_gt.pgm")


def cmd_train(args) -> int:
    from .plotting import plot_loss_trace, plot_routing
    from .train import TrainConfig, TrainingAborted, train_toy

    overrides = {"tasks": args.tasks, "steps": args.steps, "seed": args.seed, "lr": args.lr,
                 "routing": args.routing}
    if args.config is not None:
        cfg = TrainConfig.from_json(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    try:
        result = train_toy(cfg, args.out)
    except TrainingAborted as err:
        print(f"error: {err}; last finite parameters in {err.checkpoint}", file=sys.stderr)
        return 2
    write_report(result.metrics, args.out / "metrics.json", args.out / "metrics.csv")
    plot_loss_trace(result.trace, args.out / "loss.png")
    plot_routing(result.routing, cfg.tasks, cfg.branch.levels, args.out / "routing.png")
    _render_predictions(result.network, [cfg.scene_seed], cfg.scene, args.out, cfg.max_proposals)
    print(f"steps {cfg.steps}: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}"
          if cfg.steps else "no steps run")
    print(json.dumps(json.loads((args.out / "metrics.json").read_text()), indent=2))
    print(f"outputs: {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .train import TrainConfig, evaluate

    if not (args.checkpoint / "model.json").exists():
        print(f"error: no checkpoint at {args.checkpoint}", file=sys.stderr)
        return 2
    net = load_checkpoint(args.checkpoint)
    meta = json.loads((args.checkpoint / "model.json").read_text())
    cfg = TrainConfig(**meta["train_config"]) if "train_config" in meta else None
    scene_config = cfg.scene if cfg else None
    max_proposals = cfg.max_proposals if cfg else 4
    seeds = list(range(args.scene_seed, args.scene_seed + args.scenes))
    metrics = evaluate(net, seeds, scene_config, max_proposals)
    args.out.mkdir(parents=True, exist_ok=True)
    write_report(metrics, args.out / "metrics.json", args.out / "metrics.csv")
    _render_predictions(net, seeds[:2], scene_config, args.out, max_proposals)
    print(json.dumps(json.loads((args.out / "metrics.json").read_text()), indent=2))
    print(f"outputs: {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_dr1conv
    from .plotting import plot_bench

    h, w = args.hw
    result = bench_dr1conv(args.c, h, w, args.kernel, args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    result.write(args.out / "bench.json", args.out / "bench.csv")
    plot_bench(result.row(), args.out / "bench.png")
    print(f"dr1conv {result.dr1conv_median_s:.4f}s  oracle {result.oracle_median_s:.4f}s  "
          f"speedup {result.speedup:.1f}x  max|diff| {result.max_abs_diff:.2e}")
    print(f"outputs: {args.out}")
    return 0


COMMANDS = {"verify": cmd_verify, "train-toy": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
