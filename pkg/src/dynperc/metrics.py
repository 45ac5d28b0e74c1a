"""Panoptic quality, distance-matched detection AP with NDS, depth errors."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box3D

DISTANCE_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
RECALL_POINTS = 101


class MetricError(ValueError):
    pass


# -- panoptic quality ---------------------------------------------------------------

@dataclass
class PanopticMap:
    class_map: np.ndarray
    instance_map: np.ndarray

    def __post_init__(self):
        self.class_map = np.asarray(self.class_map, dtype=np.int64)
        self.instance_map = np.asarray(self.instance_map, dtype=np.int64)
        if self.class_map.shape != self.instance_map.shape:
            raise MetricError("class and instance maps differ in shape")

    def segments(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        keys = np.stack([self.class_map.ravel(), self.instance_map.ravel()], axis=1)
        for key in np.unique(keys, axis=0):
            c, i = int(key[0]), int(key[1])
            out[(c, i)] = (self.class_map == c) & (self.instance_map == i)
        return out


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    pq_th: float
    pq_st: float
    tp: int
    fp: int
    fn: int
    matches: list = field(default_factory=list)
    # (iou_sum, tp, fp, fn) for "all", "things", "stuff"; lets results pool across images
    counts: dict = field(default_factory=dict)


def validate_panoptic(m: PanopticMap, thing_classes: Iterable[int], stuff_classes: Iterable[int]) -> None:
    things, stuff = set(thing_classes), set(stuff_classes)
    present = set(np.unique(m.class_map).tolist())
    unknown = present - things - stuff
    if unknown:
        raise MetricError(f"class ids {sorted(unknown)} are outside the taxonomy")
    is_thing = np.isin(m.class_map, list(things))
    if np.any(m.instance_map[is_thing] <= 0):
        raise MetricError("thing pixels must carry instance ids > 0")
    if np.any(m.instance_map[~is_thing] != 0):
        raise MetricError("stuff pixels must carry instance id 0")


def _quality(iou_sum: float, tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return math.nan, math.nan, math.nan
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return iou_sum / denom, sq, rq


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, thing_classes: Iterable[int],
                     stuff_classes: Iterable[int]) -> PQResult:
    """Segments of the same class match when IoU > 0.5; counts are pooled over
    classes, so PQ = SQ * RQ holds exactly."""
    things, stuff = set(thing_classes), set(stuff_classes)
    if pred.class_map.shape != gt.class_map.shape:
        raise MetricError(f"map extents differ: {pred.class_map.shape} vs {gt.class_map.shape}")
    validate_panoptic(pred, things, stuff)
    validate_panoptic(gt, things, stuff)
    pseg, gseg = pred.segments(), gt.segments()
    matched_p, matched_g = set(), set()
    matches = []
    for gk, gm in gseg.items():
        for pk, pm in pseg.items():
            if pk[0] != gk[0] or pk in matched_p:
                continue
            inter = np.count_nonzero(gm & pm)
            if inter == 0:
                continue
            iou = inter / np.count_nonzero(gm | pm)
            if iou > 0.5:
                matched_p.add(pk)
                matched_g.add(gk)
                matches.append((gk, pk, iou))
                break

    def pooled(subset):
        iou_sum = sum(m[2] for m in matches if m[0][0] in subset)
        tp = sum(1 for m in matches if m[0][0] in subset)
        fp = sum(1 for k in pseg if k[0] in subset and k not in matched_p)
        fn = sum(1 for k in gseg if k[0] in subset and k not in matched_g)
        return iou_sum, tp, fp, fn

    counts = {"all": pooled(things | stuff), "things": pooled(things), "stuff": pooled(stuff)}
    return _result(counts, matches)


def _result(counts: dict, matches: list) -> PQResult:
    iou_sum, tp, fp, fn = counts["all"]
    pq, sq, rq = _quality(iou_sum, tp, fp, fn)
    return PQResult(pq, sq, rq, _quality(*counts["things"])[0], _quality(*counts["stuff"])[0],
                    tp, fp, fn, matches, counts)


def pool_panoptic(results: Sequence[PQResult]) -> PQResult:
    """Dataset-level PQ: matching stays per image, counts are summed."""
    if not results:
        raise MetricError("no panoptic results to pool")
    counts = {k: tuple(sum(r.counts[k][i] for r in results) for i in range(4))
              for k in ("all", "things", "stuff")}
    return _result(counts, [m for r in results for m in r.matches])


# -- detection ---------------------------------------------------------------------------

@dataclass
class DetectionResult:
    box: Box3D
    score: float
    class_id: int
    matched: bool = False

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise MetricError(f"score {self.score} outside [0, 1]")


def ground_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[2] - b.center[2])


def _greedy_match(preds: Sequence[DetectionResult], gts: Sequence[Box3D], threshold: float):
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = set()
    pairs = []  # (pred index, gt index or None) in score order
    for i in order:
        best, best_d = None, math.inf
        for j, g in enumerate(gts):
            if j in taken:
                continue
            d = ground_distance(preds[i].box, g)
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d <= threshold:
            taken.add(best)
            preds[i].matched = True
            pairs.append((i, best))
        else:
            preds[i].matched = False
            pairs.append((i, None))
    return pairs


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if num_gt == 0:
        return math.nan
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, RECALL_POINTS):
        above = precision[recall >= r - 1e-12]
        ap += above.max() if above.size else 0.0
    return ap / RECALL_POINTS


def distance_ap(preds: Sequence[DetectionResult], gts: Sequence[Box3D], threshold: float) -> float:
    """AP with greedy score-ordered matching on ground-plane center distance."""
    pairs = _greedy_match(preds, gts, threshold)
    return interpolated_ap([j is not None for _, j in pairs], len(gts))


def mean_ap(preds: Sequence[DetectionResult], gts: Sequence[tuple[Box3D, int]],
            classes: Iterable[int], thresholds: Sequence[float] = DISTANCE_THRESHOLDS) -> float:
    aps = []
    for c in classes:
        cp = [p for p in preds if p.class_id == c]
        cg = [g for g, gc in gts if gc == c]
        for t in thresholds:
            ap = distance_ap(cp, cg, t)
            if not math.isnan(ap):
                aps.append(ap)
    return float(np.mean(aps)) if aps else math.nan


def _wrap_angle(a: float) -> float:
    a = abs((a + math.pi) % (2 * math.pi) - math.pi)
    return a


def tp_errors(preds: Sequence[DetectionResult], gts: Sequence[Box3D],
              threshold: float = TP_THRESHOLD) -> dict[str, float]:
    """Mean translation, scale, orientation and attribute errors over matches.

    Velocity is not available and reported as 1.0 (worst case).
    """
    pairs = [(i, j) for i, j in _greedy_match(preds, gts, threshold) if j is not None]
    if not pairs:
        return {"ATE": 1.0, "ASE": 1.0, "AOE": 1.0, "AVE": 1.0, "AAE": 1.0}
    ate, ase, aoe, aae = [], [], [], []
    for i, j in pairs:
        p, g = preds[i].box, gts[j]
        ate.append(ground_distance(p, g))
        inter = np.prod(np.minimum(p.dims, g.dims))
        union = np.prod(p.dims) + np.prod(g.dims) - inter
        ase.append(1.0 - inter / union)
        aoe.append(_wrap_angle(p.yaw - g.yaw))
        if g.attribute is not None:
            aae.append(0.0 if p.attribute == g.attribute else 1.0)
    return {"ATE": float(np.mean(ate)), "ASE": float(np.mean(ase)), "AOE": float(np.mean(aoe)),
            "AVE": 1.0, "AAE": float(np.mean(aae)) if aae else 1.0}


def nds(mAP: float, mTP: Sequence[float]) -> float:
    """Detection score (1/10) [5 mAP + sum(1 - min(1, mTP))]."""
    mTP = list(mTP)
    if len(mTP) != 5:
        raise MetricError(f"NDS takes five TP errors, got {len(mTP)}")
    if not 0.0 <= mAP <= 1.0:
        raise MetricError(f"mAP {mAP} outside [0, 1]")
    if any(t < 0 for t in mTP):
        raise MetricError("TP errors must be nonnegative")
    return (5.0 * mAP + sum(1.0 - min(1.0, t) for t in mTP)) / 10.0


# -- depth -------------------------------------------------------------------------------

@dataclass
class DepthMetrics:
    abs_rel: float
    delta1: float
    delta2: float
    delta3: float
    rmse: float


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> DepthMetrics:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise MetricError("empty valid mask")
    p, g = pred[valid], gt[valid]
    if np.any(g <= 0):
        raise MetricError("ground-truth depth must be positive on valid pixels")
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
    )


# -- reports -------------------------------------------------------------------------------

def flatten_metrics(metrics: Mapping) -> dict[str, float]:
    flat = {}
    for key, value in metrics.items():
        if hasattr(value, "__dataclass_fields__"):
            value = {k: v for k, v in asdict(value).items() if not isinstance(v, list)}
        if isinstance(value, Mapping):
            for k, v in flatten_metrics(value).items():
                flat[f"{key}.{k}"] = v
        elif isinstance(value, (int, float, np.floating, np.integer)):
            flat[key] = float(value)
    return flat


def write_report(metrics: Mapping, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    flat = flatten_metrics(metrics)
    Path(json_path).write_text(json.dumps(flat, indent=2, sort_keys=True, allow_nan=True))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k in sorted(flat):
                writer.writerow([k, repr(flat[k])])
