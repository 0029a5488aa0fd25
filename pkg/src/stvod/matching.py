"""Set-prediction supervision: minimum-cost one-to-one matching between
predicted slots and ground truths, and the matched loss (sigmoid focal
classification + L1 box + generalized IoU).

The matcher is a shortest-augmenting-path assignment solver with potentials;
ground truths are processed in index order and column scans use strict
improvement, so tie-breaking deterministically prefers the lowest-index
augmenting path. Gradients never flow through the discrete assignment: the
cost matrix is built from detached values and the chosen pairs act as
constants in the loss graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .boxes import box_cs_to_corners, giou_corners


@dataclass
class LossWeights:
    """Coefficients of the classification, L1, and GIoU terms."""

    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if self.cls < 0 or self.l1 < 0 or self.giou < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of every column (ground truth) to a distinct
    row (prediction); requires rows >= columns.

    Returns (prediction, ground-truth) pairs sorted by ground-truth index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise ValueError(f"need at least as many predictions as ground truths "
                         f"({n_pred} < {n_gt})")
    if n_gt == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    # a[i, j]: cost of assigning gt i to prediction j; 1-based helper arrays.
    a = cost.T
    u = np.zeros(n_gt + 1)
    v = np.zeros(n_pred + 1)
    match = np.zeros(n_pred + 1, dtype=np.intp)  # match[j] = gt assigned to pred j
    way = np.zeros(n_pred + 1, dtype=np.intp)
    for i in range(1, n_gt + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n_pred + 1, np.inf)
        used = np.zeros(n_pred + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n_pred + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n_pred + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    pairs = [(j - 1, int(match[j]) - 1) for j in range(1, n_pred + 1) if match[j] != 0]
    return sorted(pairs, key=lambda pg: pg[1])


def focal_loss(
    logits: Node,
    target_classes: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float | None = None,
) -> Node:
    """Per-class sigmoid focal loss over logits [P, K].

    ``target_classes[p]`` is the positive class of prediction p, or -1 for
    an all-negative row. Positives are weighted alpha, negatives (1-alpha);
    the sum is divided by ``normalizer`` (defaults to the number of positive
    rows, floored at 1).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    targets = np.asarray(target_classes, dtype=np.intp)
    n, k = logits.value.shape
    onehot = np.zeros((n, k))
    matched = targets >= 0
    onehot[np.nonzero(matched)[0], targets[matched]] = 1.0
    if normalizer is None:
        normalizer = max(1.0, float(matched.sum()))

    log_p = ad.log_sigmoid(logits)
    log_not_p = ad.log_sigmoid(ad.scale(logits, -1.0))
    pos = ad.scale(ad.mul(ad.exp(ad.scale(log_not_p, gamma)), log_p), -alpha)
    neg = ad.scale(ad.mul(ad.exp(ad.scale(log_p, gamma)), log_not_p), -(1.0 - alpha))
    per_entry = ad.add(
        ad.mul(ad.constant(onehot), pos), ad.mul(ad.constant(1.0 - onehot), neg)
    )
    return ad.scale(ad.sum_all(per_entry), 1.0 / normalizer)


def giou_pairs(pred_boxes: Node, gt_boxes_cs: np.ndarray) -> Node:
    """Differentiable GIoU between matched box pairs.

    ``pred_boxes`` is [M, 4] center-size (from a sigmoid, so extents are
    positive); ``gt_boxes_cs`` is a constant [M, 4]. Returns [M] values.
    """
    m = pred_boxes.value.shape[0]
    cx = ad.narrow(pred_boxes, 1, 0, 1)
    cy = ad.narrow(pred_boxes, 1, 1, 1)
    w = ad.narrow(pred_boxes, 1, 2, 1)
    h = ad.narrow(pred_boxes, 1, 3, 1)
    half_w = ad.scale(w, 0.5)
    half_h = ad.scale(h, 0.5)
    px1, px2 = ad.sub(cx, half_w), ad.add(cx, half_w)
    py1, py2 = ad.sub(cy, half_h), ad.add(cy, half_h)

    gt = box_cs_to_corners(np.asarray(gt_boxes_cs, dtype=np.float64))
    gx1 = ad.constant(gt[:, 0:1])
    gy1 = ad.constant(gt[:, 1:2])
    gx2 = ad.constant(gt[:, 2:3])
    gy2 = ad.constant(gt[:, 3:4])
    gt_area = ad.constant(((gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1]))[:, None])

    iw = ad.relu(ad.sub(ad.minimum(px2, gx2), ad.maximum(px1, gx1)))
    ih = ad.relu(ad.sub(ad.minimum(py2, gy2), ad.maximum(py1, gy1)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(w, h), gt_area), inter)
    iou = ad.div(inter, union)

    ew = ad.sub(ad.maximum(px2, gx2), ad.minimum(px1, gx1))
    eh = ad.sub(ad.maximum(py2, gy2), ad.minimum(py1, gy1))
    enclosing = ad.mul(ew, eh)
    giou = ad.sub(iou, ad.div(ad.sub(enclosing, union), enclosing))
    return ad.reshape(giou, (m,))


def pairwise_cost(
    logits: np.ndarray,
    boxes_cs: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes_cs: np.ndarray,
    weights: LossWeights,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """Matching cost [N_pred, N_gt] mirroring the loss terms.

    The classification entry uses the focal-style probability cost on the
    ground truth's class (positive term minus negative term), so confident
    correct predictions are cheap and confident wrong ones expensive.
    """
    logits = np.asarray(logits, dtype=np.float64)
    boxes_cs = np.asarray(boxes_cs, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    gt_boxes_cs = np.asarray(gt_boxes_cs, dtype=np.float64).reshape(-1, 4)
    eps = 1e-8
    p = 1.0 / (1.0 + np.exp(-logits))
    pos_cost = alpha * (1.0 - p) ** gamma * (-np.log(p + eps))
    neg_cost = (1.0 - alpha) * p**gamma * (-np.log(1.0 - p + eps))
    cls_cost = pos_cost[:, gt_classes] - neg_cost[:, gt_classes]
    l1_cost = np.abs(boxes_cs[:, None, :] - gt_boxes_cs[None, :, :]).sum(axis=-1)
    giou_cost = 1.0 - giou_corners(box_cs_to_corners(boxes_cs), box_cs_to_corners(gt_boxes_cs))
    return weights.cls * cls_cost + weights.l1 * l1_cost + weights.giou * giou_cost


def detection_loss(
    logits: Node,
    boxes: Node,
    gt_classes: np.ndarray,
    gt_boxes_cs: np.ndarray,
    weights: LossWeights,
    alpha: float = 0.25,
    gamma: float = 2.0,
    assignment: list[tuple[int, int]] | None = None,
) -> tuple[Node, dict]:
    """Match then score one prediction set against one frame's ground truth.

    Box terms run over matched pairs only; classification runs over every
    prediction with unmatched rows as all-negative targets, everything
    normalized by the number of matched ground truths. Pass ``assignment``
    to reuse (or freeze) a previously computed matching.
    """
    n = logits.value.shape[0]
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    gt_boxes_cs = np.asarray(gt_boxes_cs, dtype=np.float64).reshape(-1, 4)
    m = gt_classes.shape[0]
    if assignment is None and m > 0:
        cost = pairwise_cost(
            logits.value, boxes.value, gt_classes, gt_boxes_cs, weights, alpha, gamma
        )
        assignment = hungarian(cost)
    elif assignment is None:
        assignment = []

    targets = np.full(n, -1, dtype=np.intp)
    for pred_i, gt_j in assignment:
        targets[pred_i] = gt_classes[gt_j]
    cls_term = focal_loss(logits, targets, alpha, gamma, normalizer=max(1.0, float(m)))
    total = ad.scale(cls_term, weights.cls)
    info = {
        "cls": float(cls_term.value),
        "l1": 0.0,
        "giou": 0.0,
        "matched": m,
        "assignment": assignment,
    }
    if m > 0:
        pred_idx = [pair[0] for pair in assignment]
        gt_idx = [pair[1] for pair in assignment]
        matched_boxes = ad.gather_rows(boxes, pred_idx)
        gt_matched = gt_boxes_cs[gt_idx]
        l1_term = ad.scale(
            ad.sum_all(ad.absolute(ad.sub(matched_boxes, ad.constant(gt_matched)))), 1.0 / m
        )
        giou_vals = giou_pairs(matched_boxes, gt_matched)
        giou_term = ad.scale(
            ad.sum_all(ad.sub(ad.constant(np.ones(m)), giou_vals)), 1.0 / m
        )
        total = ad.add(total, ad.scale(l1_term, weights.l1))
        total = ad.add(total, ad.scale(giou_term, weights.giou))
        info["l1"] = float(l1_term.value)
        info["giou"] = float(giou_term.value)
    info["total"] = float(total.value)
    return total, info
