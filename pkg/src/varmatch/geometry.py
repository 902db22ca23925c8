"""Axis-aligned box geometry: IoU, analytic IoU gradients, and anchor-relative
box encodings.

Boxes are numpy arrays ``[cx, cy, w, h]`` (center-size form) with ``w > 0`` and
``h > 0``; all functions broadcast over leading dimensions.  Two encodings are
supported:

* ``"fa"``   -- ``(dx, dy, dlogw, dlogh)`` relative to an anchor box,
* ``"fcos"`` -- ``(log l, log t, log r, log b)``, log-distances from the anchor
  center to the four box sides (log-space keeps decoded distances positive).

IoU is piecewise smooth; at alignment kinks every derivative reported here is
the one-sided derivative taken from the side of positive perturbation of the
parameter being differentiated (the "right-sided" convention).
"""

from __future__ import annotations

import numpy as np

FA = "fa"
FCOS = "fcos"
ENCODING_KINDS = (FA, FCOS)


def box(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    """Build a single validated box array."""
    if w <= 0 or h <= 0:
        raise ValueError(f"box sides must be positive, got w={w}, h={h}")
    return np.array([cx, cy, w, h], dtype=float)


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    if boxes.shape[-1] != 4:
        raise ValueError(f"boxes must have last dimension 4, got {boxes.shape}")
    if np.any(boxes[..., 2:] <= 0):
        raise ValueError("box sides must be positive")
    return boxes


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    return boxes[..., 2] * boxes[..., 3]


def as_corners(boxes: np.ndarray) -> np.ndarray:
    """Convert center-size boxes to ``[x1, y1, x2, y2]``."""
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:] * 0.5
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection over union of broadcastable center-size boxes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax1, ay1, ax2, ay2 = np.moveaxis(as_corners(a), -1, 0)
    bx1, by1, bx2, by2 = np.moveaxis(as_corners(b), -1, 0)
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    # rounding in iw/ih can push the ratio a few ulp past 1 for equal boxes
    return np.minimum(inter / union, 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of an (N, 4) set against an (M, 4) set, shape (N, M)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    return iou(a[:, None, :], b[None, :, :])


def _interval_overlap_grad(alo, ahi, blo, bhi, d_alo, d_ahi):
    """One-sided derivative of max(0, min(ahi,bhi) - max(alo,blo)) w.r.t. a
    parameter that moves the first interval's endpoints at rates d_alo, d_ahi.

    Ties are resolved from the positive-perturbation side: min follows its
    moving argument only when that argument is strictly smaller or moving
    down at the tie; max only when strictly larger or moving up.
    """
    raw = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    d_hi = np.where((ahi < bhi) | ((ahi == bhi) & (d_ahi < 0)), d_ahi, 0.0)
    d_lo = np.where((alo > blo) | ((alo == blo) & (d_alo > 0)), d_alo, 0.0)
    d_raw = d_hi - d_lo
    # clamp at zero overlap: keep the derivative only if it opens the overlap
    return np.where(raw > 0, d_raw, np.where((raw == 0) & (d_raw > 0), d_raw, 0.0))


def _iou_grad_wrt_first(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax1, ay1, ax2, ay2 = np.moveaxis(as_corners(a), -1, 0)
    bx1, by1, bx2, by2 = np.moveaxis(as_corners(b), -1, 0)

    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter

    one = np.ones_like(ax1)
    # overlap-width derivatives: cx moves both x-corners at rate 1,
    # w moves them at rates (-1/2, +1/2); same pattern in y for cy, h
    diw_dcx = _interval_overlap_grad(ax1, ax2, bx1, bx2, one, one)
    diw_dw = _interval_overlap_grad(ax1, ax2, bx1, bx2, -0.5 * one, 0.5 * one)
    dih_dcy = _interval_overlap_grad(ay1, ay2, by1, by2, one, one)
    dih_dh = _interval_overlap_grad(ay1, ay2, by1, by2, -0.5 * one, 0.5 * one)

    dinter = np.stack(
        [diw_dcx * ih, dih_dcy * iw, diw_dw * ih, dih_dh * iw], axis=-1
    )
    darea = np.stack(
        [np.zeros_like(ax1), np.zeros_like(ax1), a[..., 3], a[..., 2]], axis=-1
    )
    dunion = darea - dinter
    u = union[..., None]
    return (dinter * u - inter[..., None] * dunion) / (u * u)


def iou_gradient(a: np.ndarray, b: np.ndarray, wrt: str = "a") -> np.ndarray:
    """Analytic gradient of ``iou(a, b)`` w.r.t. one box's ``(cx, cy, w, h)``.

    The gradient is exact wherever IoU is differentiable; at kinks (aligned
    edges, exactly touching boxes) the right-sided convention documented in
    the module docstring applies.
    """
    if wrt == "a":
        return _iou_grad_wrt_first(a, b)
    if wrt == "b":
        return _iou_grad_wrt_first(b, a)
    raise ValueError(f"wrt must be 'a' or 'b', got {wrt!r}")


def encode(boxes: np.ndarray, anchors: np.ndarray, kind: str = FA) -> np.ndarray:
    """Encode boxes relative to anchors; inverse of :func:`decode`."""
    boxes = np.asarray(boxes, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    if kind == FA:
        dx = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
        dy = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
        dlw = np.log(boxes[..., 2] / anchors[..., 2])
        dlh = np.log(boxes[..., 3] / anchors[..., 3])
        return np.stack([dx, dy, dlw, dlh], axis=-1)
    if kind == FCOS:
        px, py = anchors[..., 0], anchors[..., 1]
        x1, y1, x2, y2 = np.moveaxis(as_corners(boxes), -1, 0)
        dist = np.stack([px - x1, py - y1, x2 - px, y2 - py], axis=-1)
        if np.any(dist <= 0):
            raise ValueError("location not inside box")
        return np.log(dist)
    raise ValueError(f"unknown encoding kind {kind!r}")


def decode(enc: np.ndarray, anchors: np.ndarray, kind: str = FA) -> np.ndarray:
    """Decode encodings back to center-size boxes."""
    enc = np.asarray(enc, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    if kind == FA:
        cx = anchors[..., 0] + enc[..., 0] * anchors[..., 2]
        cy = anchors[..., 1] + enc[..., 1] * anchors[..., 3]
        w = anchors[..., 2] * np.exp(enc[..., 2])
        h = anchors[..., 3] * np.exp(enc[..., 3])
        return np.stack([cx, cy, w, h], axis=-1)
    if kind == FCOS:
        px, py = anchors[..., 0], anchors[..., 1]
        left, top, right, bottom = np.moveaxis(np.exp(enc), -1, 0)
        cx = px + 0.5 * (right - left)
        cy = py + 0.5 * (bottom - top)
        return np.stack([cx, cy, left + right, top + bottom], axis=-1)
    raise ValueError(f"unknown encoding kind {kind!r}")


def fa_decode_jacobian_diag(enc: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Diagonal of d(decoded box)/d(encoding) for the "fa" kind.

    The map is componentwise: cx depends on dx only, etc., so the Jacobian
    is diagonal with entries (anchor_w, anchor_h, box_w, box_h).
    """
    enc = np.asarray(enc, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    return np.stack(
        [
            anchors[..., 2] * np.ones_like(enc[..., 0]),
            anchors[..., 3] * np.ones_like(enc[..., 1]),
            anchors[..., 2] * np.exp(enc[..., 2]),
            anchors[..., 3] * np.exp(enc[..., 3]),
        ],
        axis=-1,
    )
