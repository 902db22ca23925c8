"""Tractable detection likelihood over dense proposals.

The positive side scores how well each ground-truth box is recalled by its
bag of anchors (a smooth mean-max over per-proposal match qualities); the
negative side scores how well background proposals are suppressed, via a
probabilistic keep/drop variable whose log-likelihood reduces exactly to the
focal form ``s^gamma * log(1 - s)``.

All gradients are closed form.  Conventions:

* values returned are log-likelihoods (higher is better); trainers negate;
* ``cls_logits`` are pre-sigmoid scores; gradients are w.r.t. the logits;
* box gradients are w.r.t. decoded ``(cx, cy, w, h)``; callers chain through
  their encoding's Jacobian.

Clamps keep every log finite: match quality <= 1 - 1e-7, positive likelihood
>= 1e-12, scores inside (1e-7, 1 - 1e-7).  Gradients are zero at a clamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import iou, iou_gradient, iou_matrix

CLS_EPS = 1e-7
MATCH_MAX = 1.0 - 1e-7
POS_FLOOR = 1e-12


@dataclass
class ObjectiveReport:
    """Per-evaluation decomposition of the objective and the settings used.

    ``total_loss = alpha * kl - (w1 * log_pos + w2 * log_neg)``.
    """

    log_pos: float
    log_neg: float
    kl: float
    total_loss: float
    per_gt_meanmax: np.ndarray
    w1: float
    w2: float
    alpha: float
    gamma: float
    bag_size: int
    n_samples: int


def match_quality(cls_score, iou_value) -> np.ndarray:
    """Match quality = classification score times IoU, clamped below 1."""
    return np.minimum(np.asarray(cls_score) * np.asarray(iou_value), MATCH_MAX)


def build_bags(gt_boxes: np.ndarray, anchor_boxes: np.ndarray, n: int) -> np.ndarray:
    """Top-n anchor indices per ground truth by anchor-box IoU, shape (G, m).

    m = min(n, number of anchors).  Rows are sorted by IoU descending with
    ties broken by ascending anchor index, so bags are deterministic.
    Membership uses the fixed anchor boxes, not sampled proposals, so bags
    are stable across Monte-Carlo draws within a step.
    """
    if n < 1:
        raise ValueError("bag size must be >= 1")
    anchor_boxes = np.asarray(anchor_boxes, dtype=float).reshape(-1, 4)
    if anchor_boxes.shape[0] == 0:
        raise ValueError("at least one anchor is required")
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    m = min(int(n), anchor_boxes.shape[0])
    if gt_boxes.shape[0] == 0:
        return np.zeros((0, m), dtype=np.intp)
    overlaps = iou_matrix(gt_boxes, anchor_boxes)
    order = np.argsort(-overlaps, axis=1, kind="stable")
    return order[:, :m]


def mean_max(values: np.ndarray) -> float:
    """Smooth maximum of match values: sum(v/(1-v)) / sum(1/(1-v)).

    A weighted average with weights 1/(1-v), so the result lies between the
    mean and the max of the bag and tracks the max as the bag concentrates.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("mean_max of an empty bag")
    w = 1.0 / (1.0 - v)
    return float(np.sum(v * w) / np.sum(w))


def mean_max_gradient(values: np.ndarray) -> np.ndarray:
    """d mean_max / d values; strictly positive for values in [0, 1)."""
    v = np.asarray(values, dtype=float)
    w = 1.0 / (1.0 - v)
    denom = np.sum(w)
    mm = np.sum(v * w) / denom
    return (1.0 - mm) * w * w / denom


def keep_probability(s, gamma: float) -> np.ndarray:
    """Probability of keeping a proposal as a mined negative.

    k(s) = (1 - (1-s)^(s^gamma)) / s, evaluated via expm1/log1p so that the
    limits k -> s^gamma (s -> 0) and k -> 1 (s -> 1) hold numerically.
    k is a probability; the final clip absorbs one-ulp overshoot at gamma = 0.
    """
    s = np.clip(np.asarray(s, dtype=float), CLS_EPS, 1.0 - CLS_EPS)
    return np.minimum(-np.expm1(s**gamma * np.log1p(-s)) / s, 1.0)


def sigmoid(logits) -> np.ndarray:
    return expit(np.asarray(logits, dtype=float))


def _clip_scores(logits):
    s = sigmoid(logits)
    clipped = np.clip(s, CLS_EPS, 1.0 - CLS_EPS)
    active = (s > CLS_EPS) & (s < 1.0 - CLS_EPS)
    return clipped, active


def negative_log_likelihood(cls_logits: np.ndarray, gamma: float, mask=None):
    """Sum over proposals of log P[suppressed], in the focal form.

    log(1 - k(s) s) equals s^gamma * log(1 - s) exactly (the keep probability
    is designed for it); the focal form is the numerically safe one near
    s -> 1.  Returns (total, d total / d logits).

    ``mask``: optional boolean per proposal; False rows contribute nothing.
    """
    logits = np.asarray(cls_logits, dtype=float)
    s, active = _clip_scores(logits)
    log1m = np.log1p(-s)
    terms = s**gamma * log1m
    if gamma == 0:
        dterm_ds = -1.0 / (1.0 - s)
    else:
        dterm_ds = gamma * s ** (gamma - 1.0) * log1m - s**gamma / (1.0 - s)
    grad = np.where(active, dterm_ds * s * (1.0 - s), 0.0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        terms = np.where(mask, terms, 0.0)
        grad = np.where(mask, grad, 0.0)
    return float(np.sum(terms)), grad


def positive_log_likelihood(
    gt_boxes: np.ndarray,
    bags: np.ndarray,
    cls_logits: np.ndarray,
    boxes: np.ndarray,
):
    """Sum over ground truths of log mean-max match quality in its bag.

    Returns (total, per_gt_meanmax, d/d logits, d/d boxes).  Box gradients
    flow through the IoU factor, logit gradients through the score factor.
    A bag whose mean-max hits the 1e-12 floor contributes log(floor) with
    zero gradient (nothing to pull on when every member has zero overlap).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    logits = np.asarray(cls_logits, dtype=float)
    d_logits = np.zeros_like(logits)
    d_boxes = np.zeros_like(boxes)
    n_gt = gt_boxes.shape[0]
    per_gt = np.zeros(n_gt)
    if n_gt == 0:
        return 0.0, per_gt, d_logits, d_boxes

    s, active = _clip_scores(logits)
    total = 0.0
    for i in range(n_gt):
        members = bags[i]
        gt = gt_boxes[i]
        member_boxes = boxes[members]
        ious = iou(gt, member_boxes)
        s_m = s[members]
        m_raw = s_m * ious
        m = np.minimum(m_raw, MATCH_MAX)
        unclamped = m_raw <= MATCH_MAX
        mm = mean_max(m)
        per_gt[i] = mm
        total += float(np.log(max(mm, POS_FLOOR)))
        if mm <= POS_FLOOR:
            continue
        d_mm = mean_max_gradient(m) * unclamped / mm
        np.add.at(d_logits, members, d_mm * ious * s_m * (1.0 - s_m) * active[members])
        grad_box = iou_gradient(np.broadcast_to(gt, member_boxes.shape), member_boxes, wrt="b")
        np.add.at(d_boxes, members, (d_mm * s_m)[:, None] * grad_box)
    return total, per_gt, d_logits, d_boxes


def pseudo_log_likelihood(
    gt_boxes: np.ndarray,
    bags: np.ndarray,
    cls_logits: np.ndarray,
    boxes: np.ndarray,
    *,
    bag_size: int,
    gamma: float = 2.0,
    w_override=None,
    negatives: str = "all",
):
    """Combined weighted log-likelihood of one decoded proposal set.

    Weights default to w1 = 0.5/n_gt and w2 = 0.5/(bag_size * n_gt); with no
    ground truth the positive term vanishes and w2 falls back to
    0.5/bag_size (n_gt treated as 1 to keep the weight finite).

    ``negatives``: "all" puts every proposal in the negative sum (the
    default); "exclude_bag_members" drops bag members from it.

    Returns (ObjectiveReport, d/d logits, d/d boxes) where the report's
    total_loss is the negated weighted log-likelihood (kl = 0 at this level).
    """
    if negatives not in ("all", "exclude_bag_members"):
        raise ValueError(f"unknown negatives mode {negatives!r}")
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    n_gt = gt_boxes.shape[0]
    if w_override is not None:
        w1, w2 = float(w_override[0]), float(w_override[1])
    else:
        w1 = 0.5 / n_gt if n_gt else 0.0
        w2 = 0.5 / (bag_size * max(n_gt, 1))

    mask = None
    if negatives == "exclude_bag_members" and n_gt:
        mask = np.ones(np.asarray(cls_logits).shape[0], dtype=bool)
        mask[np.unique(bags)] = False

    log_pos, per_gt, dpos_logit, dpos_box = positive_log_likelihood(
        gt_boxes, bags, cls_logits, boxes
    )
    log_neg, dneg_logit = negative_log_likelihood(cls_logits, gamma, mask=mask)

    d_logits = w1 * dpos_logit + w2 * dneg_logit
    d_boxes = w1 * dpos_box
    report = ObjectiveReport(
        log_pos=log_pos,
        log_neg=log_neg,
        kl=0.0,
        total_loss=-(w1 * log_pos + w2 * log_neg),
        per_gt_meanmax=per_gt,
        w1=w1,
        w2=w2,
        alpha=0.0,
        gamma=float(gamma),
        bag_size=int(bag_size),
        n_samples=1,
    )
    return report, d_logits, d_boxes
