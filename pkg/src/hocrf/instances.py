"""From semantic marginals plus recalibrated detections to an instance map.

Pipeline: per-class NMS, foreground extraction (threshold heuristic with a
shrunk-box fallback), per-pixel instance identification, a dynamic-label
pairwise CRF over the D+1 instance labels, and argmax decoding.  A naive
box-matching baseline is included for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateDetectionError,
    Detection,
    DistributionField,
    LabelSpace,
    PixelGrid,
    potts_matrix,
    softmax_rows,
)
from .filters import FilterPlan

IDENTIFY_FLOOR = 1e-6
UNARY_FLOOR = 1e-6
DEFAULT_FOREGROUND_TAU = 0.5
DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class InstanceLabelSpace:
    """Dynamic label set {0 = background, 1..D = surviving detections}."""

    detections: tuple[Detection, ...]

    @property
    def count(self) -> int:
        return len(self.detections) + 1

    def class_of(self, label: int) -> int:
        if label == 0:
            raise ValueError("background instance label has no class")
        return self.detections[label - 1].class_label

    def score_of(self, label: int) -> float:
        return self.detections[label - 1].y_marginal


@dataclass
class InstanceMap:
    grid: PixelGrid
    labels: InstanceLabelSpace
    assignment: np.ndarray  # per pixel, index into the instance label set

    def present_instances(self) -> list[int]:
        """Instance labels (>= 1) that own at least one pixel."""
        present = np.unique(self.assignment)
        return [int(k) for k in present if k != 0]

    def mask_of(self, label: int) -> np.ndarray:
        return self.assignment == label


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy per-class non-maximum suppression by descending score.

    Ties in score break by original input order, keeping the result
    deterministic.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    kept: list[int] = []
    for k in order:
        cand = dets[k]
        suppressed = any(
            dets[j].class_label == cand.class_label
            and box_iou(dets[j].box, cand.box) >= iou_threshold
            for j in kept
        )
        if not suppressed:
            kept.append(k)
    kept.sort()
    return [dets[k] for k in kept]


def shrink_box(box, factor: float = 0.25):
    """Move every side inward by ``factor`` of the box extent, keeping at
    least one pixel."""
    x0, y0, x1, y1 = box
    dx = int((x1 - x0) * factor)
    dy = int((y1 - y0) * factor)
    sx0, sx1 = x0 + dx, x1 - dx
    sy0, sy1 = y0 + dy, y1 - dy
    if sx1 <= sx0:
        cx = (x0 + x1) // 2
        sx0, sx1 = cx, cx + 1
    if sy1 <= sy0:
        cy = (y0 + y1) // 2
        sy0, sy1 = cy, cy + 1
    return (sx0, sy0, sx1, sy1)


def foreground_heuristic(
    det: Detection, q: DistributionField, tau: float = DEFAULT_FOREGROUND_TAU
) -> np.ndarray:
    """Foreground pixels: box pixels whose class marginal reaches ``tau``;
    falls back to the box shrunk by 25% per side when none qualify."""
    box_px = q.grid.box_indices(det.box)
    if box_px.size == 0:
        raise DegenerateDetectionError("detection box has zero area")
    fg = box_px[q.q[box_px, det.class_label] >= tau]
    if fg.size == 0:
        fg = q.grid.box_indices(shrink_box(det.box))
    return fg


def identify_instances(
    q: DistributionField, dets: list[Detection], labels: LabelSpace
) -> tuple[DistributionField, InstanceLabelSpace]:
    """Per-pixel distribution over the D+1 instance labels.

    Instance k gets unnormalized mass Q_i(l_k) * Pr(Y_k = 1) inside its box and
    exactly zero elsewhere; the background label competes everywhere with mass
    Q_i(background).  Included channels are floored at 1e-6 before row
    normalization so no row can be degenerate.
    """
    n = q.grid.num_pixels
    space = InstanceLabelSpace(tuple(dets))
    mass = np.zeros((n, space.count))
    mass[:, 0] = np.maximum(q.q[:, labels.background_index], IDENTIFY_FLOOR)
    for k, det in enumerate(dets, start=1):
        px = q.grid.box_indices(det.box)
        mass[px, k] = np.maximum(
            q.q[px, det.class_label] * det.y_marginal, IDENTIFY_FLOOR
        )
    mass /= mass.sum(axis=1, keepdims=True)
    return DistributionField(q.grid, mass), space


def instance_unaries(identified: DistributionField) -> np.ndarray:
    """-ln Pr(v_i), floored at 1e-6 so excluded channels stay finite."""
    return -np.log(np.maximum(identified.q, UNARY_FLOOR))


def run_instance_crf(
    identified: DistributionField,
    plans: list[FilterPlan],
    kernel_weights: np.ndarray,
    iterations: int = 5,
    potts_scale: float = 1.0,
) -> DistributionField:
    """Mean field on the dynamic D+1-label CRF with label-agnostic Potts
    pairwise terms; reuses the semantic stage's filter plans."""
    num_labels = identified.num_labels
    unary = instance_unaries(identified)
    mu = potts_matrix(num_labels, potts_scale)
    q = softmax_rows(-unary)
    if num_labels == 1:
        return DistributionField(identified.grid, q)
    for _ in range(iterations):
        mixed = np.zeros_like(q)
        for plan, w in zip(plans, kernel_weights):
            if w != 0.0:
                mixed += w * plan.apply(q)
        q = softmax_rows(-unary - mixed @ mu.T)
    return DistributionField(identified.grid, q)


def decode_instances(
    q_inst: DistributionField, space: InstanceLabelSpace
) -> InstanceMap:
    """Argmax per pixel, ties toward the lower index."""
    return InstanceMap(q_inst.grid, space, np.argmax(q_inst.q, axis=1))


def naive_baseline(
    q: DistributionField, dets: list[Detection], labels: LabelSpace
) -> InstanceMap:
    """Assign a pixel to a detection iff it lies in a box whose class matches
    the pixel's semantic argmax; the highest original score wins overlaps.
    Fails on occluding same-class objects, which motivates identification by
    recalibrated scores instead."""
    space = InstanceLabelSpace(tuple(dets))
    argmax = np.argmax(q.q, axis=1)
    assign = np.zeros(q.grid.num_pixels, dtype=np.int64)
    best_score = np.full(q.grid.num_pixels, -np.inf)
    for k, det in enumerate(dets, start=1):
        px = q.grid.box_indices(det.box)
        hit = px[argmax[px] == det.class_label]
        win = hit[det.score > best_score[hit]]
        assign[win] = k
        best_score[win] = det.score
    return InstanceMap(q.grid, space, assign)


def segment_instances(
    q: DistributionField,
    dets: list[Detection],
    labels: LabelSpace,
    plans: list[FilterPlan],
    kernel_weights: np.ndarray,
    iterations: int = 5,
    potts_scale: float = 1.0,
) -> tuple[InstanceMap, DistributionField, InstanceLabelSpace]:
    """Identification followed by the instance CRF and decoding."""
    identified, space = identify_instances(q, dets, labels)
    refined = run_instance_crf(
        identified, plans, kernel_weights, iterations, potts_scale
    )
    return decode_instances(refined, space), refined, space
