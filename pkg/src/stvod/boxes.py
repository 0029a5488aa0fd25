"""Normalized bounding-box utilities: center-size form, IoU, generalized IoU.

Boxes live in normalized image coordinates, (0,0) top-left and (1,1)
bottom-right. The center-size form (cx, cy, w, h) is what the model
regresses; the corner form (x1, y1, x2, y2) is what overlap computations
use. Functions here are plain numpy (non-differentiable); the training loss
builds its own differentiable GIoU from autodiff primitives.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class BoxCS(NamedTuple):
    """Center-size box; all four fields nominally in (0, 1)."""

    cx: float
    cy: float
    w: float
    h: float


def box_cs_to_corners(box) -> np.ndarray:
    """(cx, cy, w, h) -> (x1, y1, x2, y2); works on [..., 4] arrays too."""
    b = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_corners_to_cs(box) -> np.ndarray:
    """(x1, y1, x2, y2) -> (cx, cy, w, h); rejects nonpositive extents."""
    b = np.asarray(box, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError(f"corner box with nonpositive extent: {box}")
    return np.stack([b[..., 0] + w / 2, b[..., 1] + h / 2, w, h], axis=-1)


def _areas(c: np.ndarray) -> np.ndarray:
    return np.maximum(c[..., 2] - c[..., 0], 0.0) * np.maximum(c[..., 3] - c[..., 1], 0.0)


def iou_corners(a, b) -> np.ndarray:
    """Pairwise IoU of corner boxes a [N,4] and b [M,4] -> [N,M].

    Zero-area pairs get IoU 0 instead of 0/0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def giou_corners(a, b) -> np.ndarray:
    """Pairwise generalized IoU of corner boxes: IoU - |C \\ (A u B)| / |C|.

    C is the smallest enclosing box. Values lie in (-1, 1]; degenerate boxes
    contribute an IoU term of 0 while the enclosing-box penalty still applies.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    iou = iou_corners(a, b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    enc_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    enc_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    enc_wh = np.clip(enc_rb - enc_lt, 0.0, None)
    enc = enc_wh[..., 0] * enc_wh[..., 1]
    penalty = np.where(enc > 0.0, (enc - union) / np.where(enc > 0.0, enc, 1.0), 0.0)
    return iou - penalty


def iou(a: BoxCS, b: BoxCS) -> float:
    """IoU of two center-size boxes."""
    return float(iou_corners(box_cs_to_corners(a), box_cs_to_corners(b))[0, 0])


def generalized_iou(a: BoxCS, b: BoxCS) -> float:
    """Generalized IoU of two center-size boxes."""
    return float(giou_corners(box_cs_to_corners(a), box_cs_to_corners(b))[0, 0])
