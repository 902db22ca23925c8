"""Inference and detection metrics.

Inference decodes each anchor's mean encoding (the distribution's mode),
filters by score and applies greedy NMS; the standard deviations play no
role at test time.

The headline metric is the log-average miss rate: miss rate sampled at nine
log-spaced false-positives-per-image points in [1e-2, 1], averaged in log
space with a 1e-10 floor.  Matching is greedy in descending score order, one
ground truth per detection at IoU >= match_iou; because greedy matching of
the top-k detections never depends on lower-scored ones, the single-pass
sweep below is exactly the per-threshold brute force.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import FA, decode, iou, iou_matrix
from .likelihood import sigmoid
from .model import forward

MR_FLOOR = 1e-10
FPPI_POINTS = 9
OCCLUSION_BANDS = {"bare": (0.0, 0.3), "partial": (0.3, 0.7), "heavy": (0.7, 1.0)}


@dataclass
class Detection:
    box: np.ndarray
    score: float
    scene_id: int


@dataclass
class MetricReport:
    mr: float
    ap: float
    per_band: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)  # (fppi, missrate) pairs
    n_gts: int = 0
    n_detections: int = 0

    def to_dict(self) -> dict:
        return {
            "mr": self.mr,
            "ap": self.ap,
            "per_band": self.per_band,
            "curve": [[f, m] for f, m in self.curve],
            "n_gts": self.n_gts,
            "n_detections": self.n_detections,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Ties are broken by ascending index so suppression is deterministic.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    kept = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(idx)
        if boxes.shape[0]:
            overlaps = iou(boxes[idx], boxes[order])
            suppressed[order[overlaps > iou_threshold]] = True
            suppressed[idx] = True
    return np.array(kept, dtype=np.intp)


def infer(
    model,
    scene,
    grid,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    features=None,
    log_sigma_clamp=(-6.0, 2.0),
) -> list:
    """Decode means, filter by score, suppress duplicates."""
    params = forward(model, scene, grid, features=features, log_sigma_clamp=log_sigma_clamp)
    scores = sigmoid(params.cls_logits)
    keep = np.flatnonzero(scores > score_thresh)
    if keep.size == 0:
        return []
    boxes = decode(params.mu[keep], grid.boxes[keep], FA)
    kept = nms(boxes, scores[keep], nms_iou)
    return [Detection(box=boxes[i], score=float(scores[keep][i]), scene_id=scene.scene_id) for i in kept]


def _match_detections(detections_per_scene, gts_per_scene, match_iou):
    """Global greedy matching; returns (scores, tp flags, gt_index, scene_index)
    over all detections sorted by descending score, plus total gt count.

    gt_index is the matched ground truth's index within its scene (-1 for
    unmatched); ordering ties are broken by (scene order, detection order).
    """
    rows = []
    for si, dets in enumerate(detections_per_scene):
        for di, det in enumerate(dets):
            rows.append((-det.score, si, di))
    rows.sort()
    tp = np.zeros(len(rows), dtype=bool)
    gt_idx = np.full(len(rows), -1, dtype=int)
    scene_idx = np.empty(len(rows), dtype=int)
    scores = np.empty(len(rows))
    taken = [np.zeros(np.asarray(g).reshape(-1, 4).shape[0], dtype=bool) for g in gts_per_scene]
    for k, (negscore, si, di) in enumerate(rows):
        scores[k] = -negscore
        scene_idx[k] = si
        det = detections_per_scene[si][di]
        gts = np.asarray(gts_per_scene[si], dtype=float).reshape(-1, 4)
        if gts.shape[0] == 0:
            continue
        overlaps = iou(det.box, gts)
        overlaps = np.where(taken[si], -1.0, overlaps)
        best = int(np.argmax(overlaps))
        if overlaps[best] >= match_iou:
            taken[si][best] = True
            tp[k] = True
            gt_idx[k] = best
    return scores, tp, gt_idx, scene_idx


def _sweep_curve(scores, tp_flags, n_gts, n_scenes):
    """(fppi, missrate) at every distinct-score threshold, fppi ascending."""
    n = len(scores)
    if n == 0:
        return []
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    curve = []
    for k in range(n):
        if k + 1 < n and scores[k + 1] == scores[k]:
            continue  # threshold cannot separate equal scores
        missrate = 1.0 - tp_cum[k] / n_gts
        fppi = fp_cum[k] / n_scenes
        curve.append((float(fppi), float(missrate)))
    return curve


def _log_average(curve) -> float:
    fppi = np.array([-1.0] + [p[0] for p in curve])
    mr = np.array([1.0] + [p[1] for p in curve])
    refs = np.logspace(-2.0, 0.0, FPPI_POINTS)
    samples = np.empty(FPPI_POINTS)
    for i, ref in enumerate(refs):
        j = np.where(fppi <= ref)[0][-1]
        samples[i] = mr[j]
    return float(math.exp(np.mean(np.log(np.maximum(samples, MR_FLOOR)))))


def _average_precision(tp_flags, n_gts) -> float:
    if len(tp_flags) == 0 or n_gts == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    recall = tp_cum / n_gts
    precision = tp_cum / np.arange(1, len(tp_flags) + 1)
    # precision envelope, all-point interpolation
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def log_average_miss_rate(
    detections_per_scene,
    gts_per_scene,
    match_iou: float = 0.5,
) -> MetricReport:
    """Log-average miss rate and AP over a set of scenes."""
    if len(gts_per_scene) == 0:
        raise ValueError("metric undefined: no scenes")
    n_gts = sum(np.asarray(g).reshape(-1, 4).shape[0] for g in gts_per_scene)
    if n_gts == 0:
        raise ValueError("metric undefined: no ground truth boxes")
    n_scenes = len(gts_per_scene)
    scores, tp, _, _ = _match_detections(detections_per_scene, gts_per_scene, match_iou)
    curve = _sweep_curve(scores, tp, n_gts, n_scenes)
    return MetricReport(
        mr=_log_average(curve),
        ap=_average_precision(tp, n_gts),
        curve=curve,
        n_gts=int(n_gts),
        n_detections=int(len(scores)),
    )


def occlusion_sliced_mr(
    detections_per_scene,
    gts_per_scene,
    occlusion_per_scene,
    match_iou: float = 0.5,
    bands: dict = None,
) -> dict:
    """Per-band miss rate; bands with no ground truth are omitted.

    One global matching is shared by all bands.  Inside a band, detections
    matched to out-of-band ground truths are ignored outright (neither true
    nor false positives), the usual ignore-region treatment; unmatched
    detections count as false positives everywhere.
    """
    if bands is None:
        bands = OCCLUSION_BANDS
    n_scenes = len(gts_per_scene)
    scores, tp, gt_idx, scene_idx = _match_detections(detections_per_scene, gts_per_scene, match_iou)
    labels = [np.asarray(o, dtype=float) for o in occlusion_per_scene]

    def in_band(band, value):
        lo, hi = band
        if lo == 0.0:
            return lo <= value <= hi
        return lo < value <= hi

    reports = {}
    for name, band in bands.items():
        band_gts = sum(int(np.sum([in_band(band, v) for v in lab])) if lab.size else 0 for lab in labels)
        if band_gts == 0:
            continue
        keep_rows = []
        band_tp = []
        for k in range(len(scores)):
            if tp[k]:
                matched_label = labels[scene_idx[k]][gt_idx[k]]
                if in_band(band, matched_label):
                    keep_rows.append(k)
                    band_tp.append(True)
                # matched out of band: ignored
            else:
                keep_rows.append(k)
                band_tp.append(False)
        band_scores = scores[keep_rows]
        band_tp = np.array(band_tp, dtype=bool)
        curve = _sweep_curve(band_scores, band_tp, band_gts, n_scenes)
        reports[name] = MetricReport(
            mr=_log_average(curve),
            ap=_average_precision(band_tp, band_gts),
            curve=curve,
            n_gts=band_gts,
            n_detections=int(len(band_scores)),
        )
    return reports


def variance_diagnostics(model, scenes, grid, log_sigma_clamp=(-6.0, 2.0)):
    """One row per (scene, anchor): score, summed log sigma, matched gts.

    The matched count is how many ground truths overlap the anchor's decoded
    mean box at IoU > 0.5.  Returns a float array with columns
    (scene_id, anchor_index, cls_score, sum_log_sigma, matched_gt_count).
    """
    rows = []
    for scene in scenes:
        params = forward(model, scene, grid, log_sigma_clamp=log_sigma_clamp)
        scores = sigmoid(params.cls_logits)
        boxes = decode(params.mu, grid.boxes, FA)
        slog = params.log_sigma.sum(axis=1)
        if scene.gt_boxes.shape[0]:
            matched = (iou_matrix(boxes, scene.gt_boxes) > 0.5).sum(axis=1)
        else:
            matched = np.zeros(len(grid), dtype=int)
        for a in range(len(grid)):
            rows.append((scene.scene_id, a, scores[a], slog[a], matched[a]))
    return np.array(rows, dtype=float)


def diagnostics_to_csv(rows: np.ndarray, path):
    with open(path, "w") as fh:
        fh.write("scene_id,anchor_index,cls_score,sum_log_sigma,matched_gt_count\n")
        for r in rows:
            fh.write(f"{int(r[0])},{int(r[1])},{float(r[2])!r},{float(r[3])!r},{int(r[4])}\n")


def curve_to_csv(report: MetricReport, path):
    with open(path, "w") as fh:
        fh.write("fppi,missrate\n")
        for fppi, missrate in report.curve:
            fh.write(f"{fppi!r},{missrate!r}\n")
