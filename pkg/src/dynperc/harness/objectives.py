"""Per-task losses and predictions for the toy network on a synthetic scene.

The toy setting has no box-regression head, so proposals are the cells
assigned to ground-truth 2D boxes, both in training and at evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..branches import ROI_SIZE, InstanceProposal, assign_and_filter, crop_roi, level_stride, roi_sample_pixels
from ..geometry import project
from ..heads import (
    DecodeError,
    Embedding3D,
    PanopticWeights,
    SegEmbedding,
    corner_loss,
    decode_3d_tensors,
    depth_head,
    factored_attention_mask,
    panoptic_logits,
    panoptic_loss,
    thing_weights,
)
from ..metrics import DetectionResult, PanopticMap
from ..numerics import Tensor, bce_with_logits, concat, l1_loss, mean
from .model import ForwardOutput, Network
from .scene import STUFF_CLASSES, SyntheticScene

log = logging.getLogger(__name__)

BASIS_STRIDE = 8


def proposals_for(net: Network, out: ForwardOutput, scene: SyntheticScene,
                  max_per_instance: int | None) -> list[InstanceProposal]:
    return assign_and_filter(out.embeddings(), scene.gt_instances(), max_per_instance)


def _by_instance(proposals: list[InstanceProposal], n: int) -> list[list[InstanceProposal]]:
    groups = [[] for _ in range(n)]
    for p in proposals:
        groups[p.instance].append(p)
    return groups


def _mask_target(scene: SyntheticScene, index: int, box2d) -> np.ndarray:
    ys, xs = roi_sample_pixels(box2d, ROI_SIZE)
    H, W = scene.size
    r = np.clip(np.floor(ys).astype(int), 0, H - 1)
    c = np.clip(np.floor(xs).astype(int), 0, W - 1)
    return scene.instance_mask(index)[np.ix_(r, c)].astype(np.float64)


def pano_target(scene: SyntheticScene, kept: list[int], num_stuff: int, grid: tuple[int, int]) -> np.ndarray:
    """Panoptic column index at each basis-cell center; -1 where undefined."""
    rows = np.minimum(np.arange(grid[0]) * BASIS_STRIDE + BASIS_STRIDE // 2, scene.size[0] - 1)
    cols = np.minimum(np.arange(grid[1]) * BASIS_STRIDE + BASIS_STRIDE // 2, scene.size[1] - 1)
    cls = scene.panoptic.class_map[np.ix_(rows, cols)]
    inst = scene.panoptic.instance_map[np.ix_(rows, cols)]
    target = np.full(cls.shape, -1, dtype=np.int64)
    for j, c in enumerate(STUFF_CLASSES[:num_stuff]):
        target[(cls == c) & (inst == 0)] = j
    for col, i in enumerate(kept):
        target[inst == i + 1] = num_stuff + col
    return target


def _seg_parts(net: Network, e: Tensor) -> tuple[Tensor, SegEmbedding]:
    lay = net.config.embedding_layout()
    seg = SegEmbedding.split(e[lay["t"].start:lay["s"].stop], net.config.dense, net.config.branch.num_bases)
    return e[lay["pano"]], seg


def _e3d(net: Network, p: InstanceProposal) -> Embedding3D:
    # offsets are regressed in units of the level stride
    vec = p.embedding[net.config.embedding_layout()["e3d"]]
    return Embedding3D(concat([vec[0:2] * float(level_stride(p.level)), vec[2:]]))


def seg_losses(net: Network, out: ForwardOutput, scene: SyntheticScene,
               proposals: list[InstanceProposal]) -> dict[str, Tensor]:
    F = out.basis["seg"]
    losses = {}
    masks = []
    per_instance = [[] for _ in scene.boxes2d]
    for p in proposals:
        pano_e, seg_e = _seg_parts(net, p.embedding)
        per_instance[p.instance].append(pano_e)
        R = crop_roi(F, p.box2d, ROI_SIZE, BASIS_STRIDE)
        logits = factored_attention_mask(R, seg_e, net.basis)
        masks.append(bce_with_logits(logits, _mask_target(scene, p.instance, p.box2d)))
    if masks:
        losses["mask"] = mean(concat([m.reshape(1) for m in masks]))
    W_thing, kept = thing_weights(per_instance)
    logits = panoptic_logits(F, PanopticWeights(net.W_stuff, W_thing))
    target = pano_target(scene, kept, net.config.num_stuff, F.shape[1:])
    if np.any(target >= 0):
        losses["pano"] = panoptic_loss(logits, target)
    return losses


def det3d_losses(net: Network, out: ForwardOutput, scene: SyntheticScene,
                 proposals: list[InstanceProposal]) -> dict[str, Tensor]:
    F = out.basis["det3d"]
    K = scene.intrinsics
    terms = {"ctr": [], "dim": [], "ori": [], "loc": [], "attr": []}
    for p in proposals:
        gt = scene.boxes3d[p.instance]
        e3d = _e3d(net, p)
        R = crop_roi(F, p.box2d, ROI_SIZE, BASIS_STRIDE)
        try:
            pred = decode_3d_tensors(e3d, p.pixel, K, R, net.w_z)
        except DecodeError as err:
            log.debug("skipping proposal at %s: %s", p.location, err)
            continue
        corners = corner_loss(pred, gt)
        stride = level_stride(p.level)
        target = (np.asarray(project(K, gt.center)) - np.asarray(p.pixel)) / stride
        terms["ctr"].append(l1_loss(e3d.offset * (1.0 / stride), target))
        terms["dim"].append(corners.dim)
        terms["ori"].append(corners.ori)
        terms["loc"].append(corners.loc)
        if corners.attr is not None:
            terms["attr"].append(corners.attr)
    return {k: mean(concat([t.reshape(1) for t in v])) for k, v in terms.items() if v}


def depth_loss(net: Network, out: ForwardOutput, scene: SyntheticScene) -> dict[str, Tensor]:
    pred = depth_head(out.basis["depth"], net.depth_head, net.config.branch.act)
    return {"depth": l1_loss(pred.reshape(*scene.size), scene.depth, scene.valid_depth)}


def scene_losses(net: Network, out: ForwardOutput, scene: SyntheticScene,
                 max_per_instance: int | None = 4) -> dict[str, Tensor]:
    tasks = net.config.tasks
    proposals = proposals_for(net, out, scene, max_per_instance) if scene.boxes2d else []
    losses = {}
    if "seg" in tasks:
        losses.update(seg_losses(net, out, scene, proposals))
    if "det3d" in tasks:
        losses.update(det3d_losses(net, out, scene, proposals))
    if "depth" in tasks:
        losses.update(depth_loss(net, out, scene))
    return losses


# -- inference ----------------------------------------------------------------------

@dataclass
class Prediction:
    panoptic: PanopticMap | None = None
    detections: list[DetectionResult] | None = None
    depth: np.ndarray | None = None


def predict(net: Network, scene: SyntheticScene, max_per_instance: int | None = 4) -> Prediction:
    out = net.forward(scene.image)
    tasks = net.config.tasks
    proposals = proposals_for(net, out, scene, max_per_instance) if scene.boxes2d else []
    groups = _by_instance(proposals, len(scene.boxes2d))
    pred = Prediction()
    if "seg" in tasks:
        pred.panoptic = _predict_panoptic(net, out, scene, groups)
    if "det3d" in tasks:
        dets = []
        for i, group in enumerate(groups):
            if not group:
                continue
            # closest-to-center proposal speaks for the instance
            p = group[0]
            R = crop_roi(out.basis["det3d"], p.box2d, ROI_SIZE, BASIS_STRIDE)
            try:
                box = decode_3d_tensors(_e3d(net, p), p.pixel, scene.intrinsics, R, net.w_z).to_box()
            except (DecodeError, ValueError) as err:
                log.debug("no detection for instance %d: %s", i, err)
                continue
            dets.append(DetectionResult(box, 1.0, scene.classes[i]))
        pred.detections = dets
    if "depth" in tasks:
        d = depth_head(out.basis["depth"], net.depth_head, net.config.branch.act)
        pred.depth = d.data.reshape(scene.size)
    return pred


def _predict_panoptic(net, out, scene, groups) -> PanopticMap:
    F = out.basis["seg"]
    per_instance = [[_seg_parts(net, p.embedding)[0] for p in g] for g in groups]
    W_thing, kept = thing_weights(per_instance)
    logits = panoptic_logits(F, PanopticWeights(net.W_stuff, W_thing)).data
    col = np.argmax(logits, axis=0)
    ns = net.config.num_stuff
    stuff = np.asarray(STUFF_CLASSES[:ns])
    thing_cls = np.asarray([scene.classes[i] for i in kept], dtype=np.int64)
    cls = np.where(col < ns, stuff[np.minimum(col, ns - 1)], 0)
    if kept:
        cls = np.where(col >= ns, thing_cls[np.maximum(col - ns, 0)], cls)
    inst = np.where(col >= ns, col - ns + 1, 0)
    H, W = scene.size
    up = lambda m: np.repeat(np.repeat(m, BASIS_STRIDE, 0), BASIS_STRIDE, 1)[:H, :W]
    return PanopticMap(up(cls), up(inst))
