"""Synthetic crowded scenes with controllable occlusion.

A scene is a canvas with pedestrian-like ground-truth boxes whose pairwise
overlap is controlled: every box's occlusion label (max IoU to any other box)
falls inside a requested band.  Bands follow the usual taxonomy:
bare [0, 0.3], partial (0.3, 0.7], heavy (0.7, 1].

Bands away from zero cannot be hit by independent rejection in any realistic
budget, so scenes are built from small clusters: a base box plus partners
placed at an exact offset solving IoU(base, partner) = u for a target u drawn
inside the band, with clusters kept disjoint so cross-cluster IoU is zero.

The anchor layout is a single-level grid, one anchor per cell, all sharing
one (w, h).  The raster is a per-cell count of covering boxes; the model's
per-anchor input feature is a flattened patch of that map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .distributions import TAG_SCENE, philox_generator
from .geometry import iou, iou_matrix

BANDS = {"bare": (0.0, 0.3), "partial": (0.3, 0.7), "heavy": (0.7, 1.0)}

REJECTION_BUDGET = 100_000
BAND_MARGIN = 0.02


class OcclusionInfeasibleError(RuntimeError):
    """Raised when the rejection budget runs out for an occlusion request."""


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple = (128.0, 128.0)
    count_min: int = 2
    count_max: int = 8
    w_range: tuple = (8.0, 14.0)
    h_range: tuple = (20.0, 35.0)
    band: tuple = BANDS["bare"]


@dataclass
class Scene:
    canvas: tuple
    gt_boxes: np.ndarray
    occlusion_labels: np.ndarray
    seed: int
    band: tuple
    scene_id: int = 0


@dataclass(frozen=True)
class Anchor:
    box: np.ndarray
    grid_index: tuple  # (row, col, level)


@dataclass
class AnchorGrid:
    stride: float
    rows: int
    cols: int
    anchor_w: float
    anchor_h: float
    level: int = 0
    boxes: np.ndarray = field(init=False)

    def __post_init__(self):
        cols = np.arange(self.cols)
        rows = np.arange(self.rows)
        cx = (cols + 0.5) * self.stride
        cy = (rows + 0.5) * self.stride
        gx, gy = np.meshgrid(cx, cy)  # row-major: index = row * cols + col
        n = self.rows * self.cols
        self.boxes = np.stack(
            [gx.ravel(), gy.ravel(), np.full(n, self.anchor_w), np.full(n, self.anchor_h)],
            axis=-1,
        )

    def __len__(self):
        return self.rows * self.cols

    def cell(self, index: int) -> tuple:
        return divmod(int(index), self.cols)

    def anchor(self, index: int) -> Anchor:
        r, c = self.cell(index)
        return Anchor(box=self.boxes[index], grid_index=(r, c, self.level))


def build_anchor_grid(canvas, stride: float, anchor_wh) -> AnchorGrid:
    """Grid of identical anchors at cell centers; stride must tile the canvas."""
    width, height = float(canvas[0]), float(canvas[1])
    cols = width / stride
    rows = height / stride
    if cols != int(cols) or rows != int(rows):
        raise ValueError(f"stride {stride} does not divide canvas {canvas}")
    return AnchorGrid(
        stride=float(stride),
        rows=int(rows),
        cols=int(cols),
        anchor_w=float(anchor_wh[0]),
        anchor_h=float(anchor_wh[1]),
    )


def occlusion_labels(boxes: np.ndarray) -> np.ndarray:
    """Per-box max IoU to any other box; 0 for a lone box."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = boxes.shape[0]
    if n <= 1:
        return np.zeros(n)
    overlaps = iou_matrix(boxes, boxes)
    np.fill_diagonal(overlaps, -1.0)
    return overlaps.max(axis=1)


def _sample_box(rng, config: SceneConfig):
    w = rng.uniform(*config.w_range)
    h = rng.uniform(*config.h_range)
    width, height = config.canvas
    if w > width or h > height:
        return None
    cx = rng.uniform(w / 2, width - w / 2)
    cy = rng.uniform(h / 2, height - h / 2)
    return np.array([cx, cy, w, h])


def _inside_canvas(box, canvas):
    cx, cy, w, h = box
    return (
        cx - w / 2 >= 0 and cx + w / 2 <= canvas[0] and cy - h / 2 >= 0 and cy + h / 2 <= canvas[1]
    )


def _cluster_extent(boxes):
    arr = np.asarray(boxes)
    lo = (arr[:, :2] - arr[:, 2:] / 2).min(axis=0)
    hi = (arr[:, :2] + arr[:, 2:] / 2).max(axis=0)
    return lo, hi


def _extents_disjoint(a, b):
    (alo, ahi), (blo, bhi) = a, b
    return ahi[0] <= blo[0] or bhi[0] <= alo[0] or ahi[1] <= blo[1] or bhi[1] <= alo[1]


def _offset_for_iou(prev, nxt, axis, sign, target):
    """Center offset along one axis making IoU(prev, nxt) = target.

    IoU decreases monotonically as |offset| grows, so bisection on the
    offset converges; at offset 0 the overlap is maximal (nested boxes), so
    any target below that is reachable along the axis.
    """
    lo_d, hi_d = 0.0, prev[2 + axis] + nxt[2 + axis]
    probe = nxt.copy()
    probe[:2] = prev[:2]
    probe[axis] = prev[axis]
    if iou(prev, probe) < target:
        return None  # size mismatch too large for the requested overlap
    for _ in range(80):
        mid = 0.5 * (lo_d + hi_d)
        probe[axis] = prev[axis] + sign * mid
        if iou(prev, probe) > target:
            lo_d = mid
        else:
            hi_d = mid
    return 0.5 * (lo_d + hi_d)


def _make_cluster(rng, config: SceneConfig, size: int, lo: float, hi: float):
    """Chain of boxes whose consecutive IoU hits an in-band target exactly.

    Consecutive targets are drawn inside [lo + margin, hi - margin]; the
    next box re-samples its own size (crowds are not clones) and its center
    offset along the chain axis is solved by bisection to meet the target.
    The chain marches in one fixed direction, so non-consecutive overlaps
    stay strictly below the consecutive ones and labels stay in band.
    """
    base = _sample_box(rng, config)
    if base is None:
        return None
    t_lo = min(lo + BAND_MARGIN, (lo + hi) / 2)
    t_hi = max(hi - BAND_MARGIN, (lo + hi) / 2)
    axis = int(rng.integers(2))
    sign = 1.0 if rng.integers(2) else -1.0
    boxes = [base]
    for _ in range(size - 1):
        u = rng.uniform(t_lo, t_hi)
        prev = boxes[-1]
        nxt = prev.copy()
        nxt[2] = np.clip(prev[2] * rng.uniform(0.85, 1.15), *config.w_range)
        nxt[3] = np.clip(prev[3] * rng.uniform(0.85, 1.15), *config.h_range)
        offset = _offset_for_iou(prev, nxt, axis, sign, u)
        if offset is None:
            return None
        nxt[axis] = prev[axis] + sign * offset
        if not _inside_canvas(nxt, config.canvas):
            return None
        boxes.append(nxt)
    return boxes


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Sample a scene whose occlusion labels all fall inside config.band.

    Deterministic per seed.  Raises OcclusionInfeasibleError when the
    rejection budget is exhausted (tiny canvas, unreachable band).
    """
    lo, hi = config.band
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"band must satisfy 0 <= lo < hi <= 1, got {config.band}")
    rng = philox_generator(seed, TAG_SCENE)
    count = int(rng.integers(config.count_min, config.count_max + 1))

    attempts = 0
    if lo <= BAND_MARGIN:
        # band reaches zero overlap: independent placement with a cap
        cap = hi - BAND_MARGIN
        boxes = []
        while len(boxes) < count:
            attempts += 1
            if attempts > REJECTION_BUDGET:
                raise OcclusionInfeasibleError("infeasible occlusion request")
            cand = _sample_box(rng, config)
            if cand is None:
                continue
            if boxes and iou_matrix(cand, np.array(boxes)).max() > cap:
                continue
            boxes.append(cand)
        gt = np.array(boxes)
    else:
        # overlap mandatory: build disjoint clusters of exact-IoU chains
        sizes = [2] * (count // 2)
        if count % 2:
            if sizes:
                sizes[0] = 3
            else:
                raise OcclusionInfeasibleError(
                    "infeasible occlusion request: a single box cannot overlap"
                )
        while True:
            clusters = []
            extents = []
            for size in sizes:
                while True:
                    attempts += 1
                    if attempts > REJECTION_BUDGET:
                        raise OcclusionInfeasibleError("infeasible occlusion request")
                    cluster = _make_cluster(rng, config, size, lo, hi)
                    if cluster is None:
                        continue
                    ext = _cluster_extent(cluster)
                    if all(_extents_disjoint(ext, e) for e in extents):
                        clusters.append(cluster)
                        extents.append(ext)
                        break
            gt = np.concatenate([np.array(c) for c in clusters], axis=0)
            labels = occlusion_labels(gt)
            # size-jittered chains can overshoot through non-consecutive
            # overlaps; rebuild the scene when any label escapes the band
            if np.all(labels >= lo - BAND_MARGIN) and np.all(labels <= hi + BAND_MARGIN):
                break
            attempts += 1
            if attempts > REJECTION_BUDGET:
                raise OcclusionInfeasibleError("infeasible occlusion request")

    labels = occlusion_labels(gt)
    if np.any(labels < lo - BAND_MARGIN) or np.any(labels > hi + BAND_MARGIN):
        raise OcclusionInfeasibleError("infeasible occlusion request")
    return Scene(
        canvas=(float(config.canvas[0]), float(config.canvas[1])),
        gt_boxes=gt,
        occlusion_labels=labels,
        seed=int(seed),
        band=(float(lo), float(hi)),
    )


def rasterize(scene: Scene, grid: AnchorGrid, patch: int = 5):
    """Coverage-count map plus per-anchor patch features.

    Map value at a cell = number of gt boxes covering the cell center
    (closed inclusion), clipped at 4.  The feature of anchor (r, c) is the
    flattened patch x patch window of the map centered there, zero-padded
    at borders; patch must be odd.
    """
    if patch % 2 != 1 or patch < 1:
        raise ValueError("patch size must be odd and positive")
    centers = grid.boxes[:, :2]
    boxes = scene.gt_boxes
    if boxes.shape[0] == 0:
        counts = np.zeros((grid.rows, grid.cols))
    else:
        d = np.abs(centers[:, None, :] - boxes[None, :, :2])
        inside = np.all(d <= boxes[None, :, 2:] / 2, axis=-1)
        counts = np.minimum(inside.sum(axis=1), 4).astype(float).reshape(grid.rows, grid.cols)
    half = patch // 2
    padded = np.pad(counts, half)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    features = windows.reshape(grid.rows * grid.cols, patch * patch).copy()
    return counts, features


def scene_to_json(scene: Scene) -> str:
    return json.dumps(
        {
            "canvas": list(scene.canvas),
            "boxes": [[float(v) for v in row] for row in scene.gt_boxes],
            "seed": scene.seed,
            "band": list(scene.band),
        }
    )


def scene_from_json(line: str, scene_id: int = 0) -> Scene:
    data = json.loads(line)
    boxes = np.array(data["boxes"], dtype=float).reshape(-1, 4)
    return Scene(
        canvas=tuple(float(v) for v in data["canvas"]),
        gt_boxes=boxes,
        occlusion_labels=occlusion_labels(boxes),
        seed=int(data["seed"]),
        band=tuple(float(v) for v in data["band"]),
        scene_id=scene_id,
    )


def save_dataset(scenes, path):
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene) + "\n")


def load_dataset(path):
    scenes = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if line:
                scenes.append(scene_from_json(line, scene_id=i))
    return scenes
