"""Region-level average precision for instance segmentation.

A prediction counts as correct when its mask IoU with a same-class,
still-unmatched ground-truth instance reaches the threshold.  Predictions are
ranked dataset-wide by score; matching is greedy in that order, taking the
highest-IoU available ground truth within the prediction's own image.
AP is the area under the monotone precision envelope sampled at every recall
point.  The volume score averages AP over thresholds 0.1 to 0.9 in steps
of 0.1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOLUME_THRESHOLDS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 10))


@dataclass(frozen=True)
class GroundTruthInstance:
    class_label: int
    mask: np.ndarray  # boolean pixel mask


@dataclass(frozen=True)
class PredictedInstance:
    class_label: int
    mask: np.ndarray
    score: float


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a n b| / |a u b| for boolean masks on the same grid."""
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def _ranked_predictions(preds, class_label):
    """(image index, prediction) pairs of one class, by descending score with
    a deterministic tie-break."""
    entries = [
        (img_idx, p_idx, p)
        for img_idx, plist in enumerate(preds)
        for p_idx, p in enumerate(plist)
        if p.class_label == class_label
    ]
    entries.sort(key=lambda e: (-e[2].score, e[0], e[1]))
    return entries


def match_predictions(preds, gts, iou_threshold, class_label):
    """Greedy matching; returns (tp flags in rank order, num ground truths)."""
    npos = sum(1 for g in _flat(gts) if g.class_label == class_label)
    used = [
        [False] * len(glist) for glist in gts
    ]
    flags = []
    for img_idx, _, pred in _ranked_predictions(preds, class_label):
        best_iou, best_g = 0.0, -1
        for g_idx, gt in enumerate(gts[img_idx]):
            if used[img_idx][g_idx] or gt.class_label != class_label:
                continue
            iou = mask_iou(pred.mask, gt.mask)
            if iou > best_iou:
                best_iou, best_g = iou, g_idx
        if best_g >= 0 and best_iou >= iou_threshold:
            used[img_idx][best_g] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, npos


def _flat(per_image):
    for items in per_image:
        yield from items


def average_precision(tp_flags, npos) -> float:
    """Area under the monotone precision envelope over all recall points."""
    if npos == 0:
        raise ValueError("no ground-truth instances for this class")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / npos
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def apr_at(preds, gts, iou_threshold: float, class_label: int) -> float | None:
    """AP for one class at one mask-IoU threshold; None when the class has no
    ground truth (reported as skipped)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    flags, npos = match_predictions(preds, gts, iou_threshold, class_label)
    if npos == 0:
        return None
    return average_precision(flags, npos)


@dataclass
class AprSummary:
    thresholds: tuple[float, ...]
    per_class: dict[int, dict[float, float]]  # class -> threshold -> AP
    mean_ap: dict[float, float]  # threshold -> mean over present classes
    volume: float  # mean AP over the 0.1..0.9 grid
    skipped_classes: tuple[int, ...] = field(default=())

    def format_table(self) -> str:
        lines = ["%-10s %8s" % ("threshold", "mean AP")]
        for t in self.thresholds:
            lines.append("%-10.2f %8.4f" % (t, self.mean_ap[t]))
        lines.append("%-10s %8.4f" % ("volume", self.volume))
        if self.skipped_classes:
            lines.append("skipped classes (no GT): %s"
                         % ", ".join(map(str, self.skipped_classes)))
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "mean_ap": {("%.2f" % t): self.mean_ap[t] for t in self.thresholds},
            "per_class": {
                str(c): {("%.2f" % t): v for t, v in row.items()}
                for c, row in self.per_class.items()
            },
            "volume": self.volume,
            "skipped_classes": list(self.skipped_classes),
        }


def apr_summary(preds, gts, thresholds) -> AprSummary:
    """Mean AP over classes present in the ground truth, per threshold, plus
    the volume average over the fixed 0.1..0.9 grid."""
    thresholds = tuple(thresholds)
    if not thresholds:
        raise ValueError("need at least one threshold")
    gt_classes = sorted({g.class_label for g in _flat(gts)})
    pred_classes = {p.class_label for p in _flat(preds)}
    skipped = tuple(sorted(pred_classes - set(gt_classes)))

    all_t = sorted(set(thresholds) | set(VOLUME_THRESHOLDS))
    per_class: dict[int, dict[float, float]] = {c: {} for c in gt_classes}
    for c in gt_classes:
        for t in all_t:
            per_class[c][t] = apr_at(preds, gts, t, c)

    def mean_at(t):
        return float(np.mean([per_class[c][t] for c in gt_classes])) if gt_classes else 0.0

    mean_ap = {t: mean_at(t) for t in all_t}
    volume = float(np.mean([mean_ap[t] for t in VOLUME_THRESHOLDS])) if gt_classes else 0.0
    return AprSummary(
        thresholds,
        {c: {t: per_class[c][t] for t in thresholds} for c in gt_classes},
        {t: mean_ap[t] for t in thresholds},
        volume,
        skipped,
    )
