"""Detection evaluation: IoU, greedy matching, precision/recall and COCO-style AP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .labels import Detection, NormBox

IOU_THRESHOLDS: Tuple[float, ...] = tuple(k / 100 for k in range(50, 100, 5))
N_RECALL_POINTS = 101


class UnknownImageError(KeyError):
    """Detections reference an image that has no ground-truth entry."""


def iou(a: NormBox, b: NormBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from corners so that iou(a, a) is exactly 1
    union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


@dataclass(frozen=True)
class DetectionMatch:
    det_index: int
    confidence: float
    is_tp: bool
    gt_index: Optional[int]
    iou: float


@dataclass(frozen=True)
class MatchOutcome:
    """Matching result for one image; ``matches`` is in processing order."""

    matches: Tuple[DetectionMatch, ...]
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(m.is_tp for m in self.matches)

    @property
    def fp(self) -> int:
        return len(self.matches) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def _ranked(dets: Sequence[Detection]) -> List[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def greedy_match(dets: Sequence[Detection], gts: Sequence[NormBox], thr: float) -> MatchOutcome:
    """Match detections to ground truth in descending confidence.

    Each detection claims the still-unmatched same-class ground truth with
    the highest IoU, provided that IoU is ``>= thr``.
    """
    if not 0.0 < thr <= 1.0:
        raise ValueError(f"IoU threshold {thr} outside (0, 1]")
    taken = [False] * len(gts)
    matches = []
    for i in _ranked(dets):
        det = dets[i]
        best_j, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.box.class_id:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j is not None and best_iou >= thr:
            taken[best_j] = True
            matches.append(DetectionMatch(i, det.confidence, True, best_j, best_iou))
        else:
            matches.append(DetectionMatch(i, det.confidence, False, None, 0.0))
    return MatchOutcome(tuple(matches), len(gts))


def precision_recall(outcomes) -> Tuple[float, float]:
    """Pooled precision and recall; an empty denominator yields 1.0."""
    if isinstance(outcomes, MatchOutcome):
        outcomes = [outcomes]
    tp = sum(o.tp for o in outcomes)
    fp = sum(o.fp for o in outcomes)
    fn = sum(o.fn for o in outcomes)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    tp_cum: np.ndarray
    n_gt: int


def _match_all(dets_by_image, gts_by_image, thr):
    unknown = set(dets_by_image) - set(gts_by_image)
    if unknown:
        raise UnknownImageError(f"detections for unknown image ids: {sorted(map(str, unknown))}")
    return {
        image_id: greedy_match(dets_by_image.get(image_id, ()), gts, thr)
        for image_id, gts in gts_by_image.items()
    }


def pr_curve(outcomes: Mapping[str, MatchOutcome]) -> PrCurve:
    """Rank every detection across images by confidence and accumulate."""
    ranked = []
    for order, image_id in enumerate(sorted(outcomes, key=str)):
        for m in outcomes[image_id].matches:
            ranked.append((-m.confidence, order, m.det_index, m.is_tp))
    ranked.sort()
    n_gt = sum(o.n_gt for o in outcomes.values())
    hits = np.array([r[3] for r in ranked], dtype=np.int64)
    tp_cum = np.cumsum(hits)
    fp_cum = np.cumsum(1 - hits)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = tp_cum / n_gt if n_gt else np.zeros(len(hits))
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    return PrCurve(recall, precision, tp_cum, n_gt)


def interpolated_ap(curve: PrCurve) -> float:
    """101-point AP over the running-max precision envelope."""
    if curve.n_gt == 0 or len(curve.precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    # recall >= k/100 tested in integers to keep grid points exact
    scaled = curve.tp_cum * (N_RECALL_POINTS - 1)
    levels = np.arange(N_RECALL_POINTS) * curve.n_gt
    idx = np.searchsorted(scaled, levels, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.sum() / N_RECALL_POINTS)


def average_precision(
    dets_by_image: Mapping[str, Sequence[Detection]],
    gts_by_image: Mapping[str, Sequence[NormBox]],
    thr: float,
) -> float:
    return interpolated_ap(pr_curve(_match_all(dets_by_image, gts_by_image, thr)))


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    mean_iou: float

    FIELDS = ("precision", "recall", "map50", "map50_95", "mean_iou")
    COLUMNS = ("Precision", "Recall", "mAP50", "mAP50-95", "IoU")

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.FIELDS, self.values()))


def evaluate(
    dets_by_image: Mapping[str, Sequence[Detection]],
    gts_by_image: Mapping[str, Sequence[NormBox]],
) -> EvalReport:
    """Single-class evaluation of a split.

    ``gts_by_image`` must list every evaluated image, including those with
    no boxes; images missing from ``dets_by_image`` have no detections.
    """
    aps = []
    at50 = None
    for thr in IOU_THRESHOLDS:
        outcomes = _match_all(dets_by_image, gts_by_image, thr)
        if at50 is None:
            at50 = outcomes
        aps.append(interpolated_ap(pr_curve(outcomes)))
    precision, recall = precision_recall(list(at50.values()))
    ious = [m.iou for o in at50.values() for m in o.matches if m.is_tp]
    mean_iou = float(np.mean(ious)) if ious else 0.0
    return EvalReport(
        precision=precision,
        recall=recall,
        map50=aps[0],
        map50_95=float(np.mean(aps)),
        mean_iou=mean_iou,
    )
