"""Synthetic street scenes: textured cuboids on a ground plane under a pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as PolyPath

from ..branches import GtInstance
from ..geometry import (
    Box3D,
    CameraIntrinsics,
    box_corners,
    project,
    project_points,
    relative_crop_params,
    update_intrinsics,
)
from ..heads import MAX_DEPTH
from ..metrics import PanopticMap
from ..numerics import Tensor, linear_interp_matrix, resample

SKY, ROAD, CAR, PEDESTRIAN = 0, 1, 2, 3
STUFF_CLASSES = (SKY, ROAD)
THING_CLASSES = (CAR, PEDESTRIAN)
CLASS_NAMES = {SKY: "sky", ROAD: "road", CAR: "car", PEDESTRIAN: "pedestrian"}

# (h, w, l) ranges in meters
DIMS = {CAR: ((1.4, 1.8), (1.6, 2.0), (3.6, 4.8)), PEDESTRIAN: ((1.6, 1.9), (0.5, 0.7), (0.5, 0.8))}
CLASS_COLORS = {CAR: (0.75, 0.2, 0.15), PEDESTRIAN: (0.2, 0.65, 0.25)}

# corner index quadruples, cyclic order, one per face
FACES = tuple(
    tuple(base | m for m in (0, b1, b1 | b2, b2))
    for bit, (b1, b2) in ((4, (2, 1)), (2, (4, 1)), (1, (4, 2)))
    for base in (0, bit)
)


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 256
    focal: float = 200.0
    horizon: float = 0.4  # principal point row as a fraction of height
    camera_height: float = 1.6
    min_objects: int = 1
    max_objects: int = 6
    depth_range: tuple[float, float] = (6.0, 30.0)
    pedestrian_prob: float = 0.3
    num_attributes: int = 2
    max_tries: int = 100

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2, self.height * self.horizon)


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3 x H x W in [0, 1]
    intrinsics: CameraIntrinsics
    boxes3d: list[Box3D]
    boxes2d: list[tuple[float, float, float, float]]
    classes: list[int]
    panoptic: PanopticMap
    depth: np.ndarray  # H x W, meters
    seed: int
    valid_depth: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid_depth is None:
            self.valid_depth = self.depth > 0

    @property
    def size(self) -> tuple[int, int]:
        return self.depth.shape

    def gt_instances(self) -> list[GtInstance]:
        return [GtInstance(b, c, i) for i, (b, c) in enumerate(zip(self.boxes2d, self.classes))]

    def instance_mask(self, index: int) -> np.ndarray:
        return self.panoptic.instance_map == index + 1

    def to_bytes(self) -> bytes:
        parts = [self.image, self.depth, self.panoptic.class_map, self.panoptic.instance_map]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _sample_object(rng: np.random.Generator, cfg: SceneConfig, K: CameraIntrinsics):
    cls = PEDESTRIAN if rng.random() < cfg.pedestrian_prob else CAR
    dims = tuple(float(rng.uniform(*r)) for r in DIMS[cls])
    for _ in range(cfg.max_tries):
        z = float(rng.uniform(*cfg.depth_range))
        u = float(rng.uniform(0.1, 0.9) * cfg.width)
        x = (u - K.u0) * z / K.fx
        box = Box3D((x, cfg.camera_height - dims[0] / 2, z), dims, float(rng.uniform(-np.pi, np.pi)),
                    int(rng.integers(cfg.num_attributes)) if cfg.num_attributes else None)
        corners = box_corners(box)
        if np.any(corners[:, 2] <= 0.5):
            continue
        uv = project_points(K, corners)
        if uv[:, 0].min() >= 0 and uv[:, 1].min() >= 0 and uv[:, 0].max() <= cfg.width \
                and uv[:, 1].max() <= cfg.height:
            box2d = (float(uv[:, 0].min()), float(uv[:, 1].min()),
                     float(uv[:, 0].max()), float(uv[:, 1].max()))
            return cls, box, box2d
    return None


def _face_depth(K: CameraIntrinsics, quad: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    # depth along each pixel ray to the face plane; ray = ((u-u0)/fx, (v-v0)/fy, 1)
    n = np.cross(quad[1] - quad[0], quad[3] - quad[0])
    rays = np.stack([(us - K.u0) / K.fx, (vs - K.v0) / K.fy, np.ones_like(us)], axis=-1)
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (quad[0] @ n) / denom
    return np.where(np.abs(denom) > 1e-12, z, np.inf)


def _render_background(cfg: SceneConfig, K: CameraIntrinsics, rng: np.random.Generator):
    H, W = cfg.height, cfg.width
    vs = np.arange(H) + 0.5
    below = vs > K.v0
    with np.errstate(divide="ignore"):
        ground = np.where(below, K.fy * cfg.camera_height / np.maximum(vs - K.v0, 1e-9), MAX_DEPTH)
    depth = np.repeat(np.minimum(ground, MAX_DEPTH)[:, None], W, axis=1)
    classes = np.repeat(np.where(below, ROAD, SKY)[:, None], W, axis=1)

    image = np.empty((3, H, W))
    t = (vs / H)[:, None]
    sky = np.array([0.45, 0.65, 0.95])[:, None, None] * (1.0 - 0.4 * t)[None]
    noise = rng.normal(0.0, 0.03, size=(H, W))
    stripes = 0.05 * (np.sin(0.8 * np.log(np.maximum(depth, 1.0)) * 6.0) > 0)
    road = (0.38 + noise + stripes)[None] * np.ones((3, 1, 1))
    image[:] = np.where(below[None, :, None], road, sky)
    return image, depth, classes


def gen_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Deterministic scene for ``seed``: objects are drawn far to near with a
    per-pixel depth test against what is already painted."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics()
    image, depth, class_map = _render_background(cfg, K, rng)
    instance_map = np.zeros(depth.shape, dtype=np.int64)

    objects = []
    for _ in range(int(rng.integers(cfg.min_objects, cfg.max_objects + 1))):
        obj = _sample_object(rng, cfg, K)
        if obj is not None:
            objects.append(obj)

    H, W = depth.shape
    order = sorted(range(len(objects)), key=lambda i: -objects[i][1].center[2])
    for idx in order:
        cls, box, box2d = objects[idx]
        corners = box_corners(box)
        uv = project_points(K, corners)
        c0, r0 = max(int(np.floor(box2d[0])), 0), max(int(np.floor(box2d[1])), 0)
        c1, r1 = min(int(np.ceil(box2d[2])), W), min(int(np.ceil(box2d[3])), H)
        if c1 <= c0 or r1 <= r0:
            continue
        jj, ii = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
        pts = np.stack([jj.ravel(), ii.ravel()], axis=1)
        obj_depth = np.full(pts.shape[0], np.inf)
        shade = np.zeros(pts.shape[0])
        for f, face in enumerate(FACES):
            inside = PolyPath(uv[list(face)]).contains_points(pts)
            if not inside.any():
                continue
            z = _face_depth(K, corners[list(face)], pts[inside, 0], pts[inside, 1])
            z = np.where(z > 0, z, np.inf)
            closer = z < obj_depth[inside]
            sel = np.flatnonzero(inside)[closer]
            obj_depth[sel] = z[closer]
            shade[sel] = 0.55 + 0.08 * f
        hit = obj_depth < depth[r0:r1, c0:c1].ravel()
        if not hit.any():
            continue
        rows = ii.ravel()[hit].astype(int)
        cols = jj.ravel()[hit].astype(int)
        depth[rows, cols] = obj_depth[hit]
        class_map[rows, cols] = cls
        instance_map[rows, cols] = idx + 1
        checker = 0.85 + 0.15 * (((rows // 3) + (cols // 3)) % 2)
        color = np.asarray(CLASS_COLORS[cls])[:, None] * (shade[hit] * checker)[None]
        image[:, rows, cols] = color

    np.clip(image, 0.0, 1.0, out=image)
    return SyntheticScene(
        image=image, intrinsics=K,
        boxes3d=[o[1] for o in objects], boxes2d=[o[2] for o in objects], classes=[o[0] for o in objects],
        panoptic=PanopticMap(class_map, instance_map), depth=depth, seed=seed,
    )


def augment_scene(scene: SyntheticScene, rng: np.random.Generator, low: float = 0.5,
                  high: float = 1.0) -> SyntheticScene:
    """Relative crop resized back to the original size, with intrinsics updated
    to match. Objects whose projected center leaves the crop are dropped from
    the box lists; their pixels become stuff."""
    H, W = scene.size
    s, x0, y0, _ = relative_crop_params(rng, (H, W), low, high)
    K2 = update_intrinsics(scene.intrinsics, s, x0, y0)
    # continuous source coordinates of output pixel centers, as indices
    src_r = (np.arange(H) + 0.5 + y0) / s - 0.5
    src_c = (np.arange(W) + 0.5 + x0) / s - 0.5
    image = resample(Tensor(scene.image), linear_interp_matrix(src_r, H), linear_interp_matrix(src_c, W)).data
    nr = np.clip(np.floor(src_r + 0.5).astype(int), 0, H - 1)
    nc = np.clip(np.floor(src_c + 0.5).astype(int), 0, W - 1)
    depth = scene.depth[np.ix_(nr, nc)]
    cls_map = scene.panoptic.class_map[np.ix_(nr, nc)].copy()
    inst_map = scene.panoptic.instance_map[np.ix_(nr, nc)].copy()

    keep = []
    for i, b in enumerate(scene.boxes3d):
        u, v = project(K2, b.center)
        if 0 <= u < W and 0 <= v < H:
            keep.append(i)
    boxes2d = []
    new_inst = np.zeros_like(inst_map)
    for n, i in enumerate(keep):
        x1, y1, x2, y2 = scene.boxes2d[i]
        boxes2d.append((max(x1 * s - x0, 0.0), max(y1 * s - y0, 0.0),
                        min(x2 * s - x0, float(W)), min(y2 * s - y0, float(H))))
        new_inst[inst_map == i + 1] = n + 1
    dropped = (inst_map > 0) & (new_inst == 0)
    cls_map[dropped] = np.where(depth[dropped] >= MAX_DEPTH, SKY, ROAD)
    return SyntheticScene(image=image, intrinsics=K2, boxes3d=[scene.boxes3d[i] for i in keep],
                          boxes2d=boxes2d, classes=[scene.classes[i] for i in keep],
                          panoptic=PanopticMap(cls_map, new_inst), depth=depth, seed=scene.seed)
