"""Detection quality: per-class average precision at a fixed IoU threshold.

The protocol is the classic one: per class, detections across all frames
are ranked by score; each is greedily matched to the not-yet-matched
same-frame ground truth of highest IoU (if that IoU clears the threshold),
otherwise it counts as a false positive. AP is the area under the
all-point-interpolated precision/recall curve; mAP averages over classes
that have at least one ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import box_cs_to_corners, iou_corners


@dataclass
class EvalResult:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    mean_ap: float | None = None
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mean_ap": self.mean_ap,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "note": self.note,
        }


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point-interpolated area under a PR sweep (VOC-style envelope)."""
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(((mrec[changed] - mrec[changed - 1]) * mpre[changed]).sum())


def evaluate_map(detections_per_frame, gts_per_frame, iou_threshold: float = 0.5) -> EvalResult:
    """Score detections against ground truths, frame-aligned lists.

    Detections need ``class_id``, ``score`` (max class sigmoid), and ``box``
    attributes; ground truths need ``class_id`` and ``box``. With no ground
    truths anywhere, mAP is undefined and reported as such.
    """
    if len(detections_per_frame) != len(gts_per_frame):
        raise ValueError(
            f"frame count mismatch: {len(detections_per_frame)} detection lists "
            f"vs {len(gts_per_frame)} ground-truth lists"
        )
    gt_classes = sorted({g.class_id for frame in gts_per_frame for g in frame})
    det_classes = sorted({d.class_id for frame in detections_per_frame for d in frame})
    total_gt = sum(len(frame) for frame in gts_per_frame)

    result = EvalResult()
    if total_gt == 0:
        result.false_positives = sum(len(frame) for frame in detections_per_frame)
        result.note = "no ground truths; mAP undefined"
        return result

    for cls in sorted(set(gt_classes) | set(det_classes)):
        dets = [
            (frame_i, det_i, det)
            for frame_i, frame in enumerate(detections_per_frame)
            for det_i, det in enumerate(frame)
            if det.class_id == cls
        ]
        dets.sort(key=lambda item: (-item[2].score, item[0], item[1]))
        gt_boxes = {
            frame_i: np.array(
                [box_cs_to_corners(g.box) for g in frame if g.class_id == cls]
            ).reshape(-1, 4)
            for frame_i, frame in enumerate(gts_per_frame)
        }
        n_gt = sum(b.shape[0] for b in gt_boxes.values())
        matched = {frame_i: np.zeros(b.shape[0], dtype=bool) for frame_i, b in gt_boxes.items()}

        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, (frame_i, _, det) in enumerate(dets):
            candidates = gt_boxes[frame_i]
            if candidates.shape[0] == 0:
                fp[rank] = 1.0
                continue
            ious = iou_corners(box_cs_to_corners(det.box)[None, :], candidates)[0]
            ious = np.where(matched[frame_i], -1.0, ious)
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[frame_i][best] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0

        result.true_positives += int(tp.sum())
        result.false_positives += int(fp.sum())
        if n_gt == 0:
            continue  # detections without any ground truth of this class: FPs only
        result.false_negatives += n_gt - int(tp.sum())
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recalls = cum_tp / n_gt
        precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        result.per_class_ap[cls] = average_precision(recalls, precisions)

    result.mean_ap = float(np.mean([result.per_class_ap[c] for c in gt_classes]))
    return result
