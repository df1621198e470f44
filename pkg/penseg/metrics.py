"""
    Detection metrics: IoU matrices, optimal one-to-one matching by linear
    sum assignment, and the Jaccard index, precision, recall and
    segmentation quality derived from a matching.
"""

from dataclasses import dataclass
from typing import Dict, Final, Iterable, List, Literal, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.optimize import linear_sum_assignment  # type: ignore

from penseg.annotations import AnnotationSet, DetectionSet
from penseg.utils import validate_choice

Eligibility = Literal["assign_then_demote", "mask_then_assign"]

ELIGIBILITY_RULES: Final[Sequence[str]] = ("assign_then_demote", "mask_then_assign")

DEFAULT_IOU_THRESHOLD: Final[float] = 0.5


def iou_matrix(
    gt: Union[AnnotationSet, DetectionSet], pred: Union[AnnotationSet, DetectionSet]
) -> np.ndarray:
    """
    The `|gt| x |pred|` matrix of mask IoUs.
    """
    if isinstance(gt, AnnotationSet):
        gt = DetectionSet.from_annotations(gt)
    if isinstance(pred, AnnotationSet):
        pred = DetectionSet.from_annotations(pred)
    if gt.frame != pred.frame:
        raise ValueError(f"Frame mismatch: {gt.frame} vs {pred.frame}.")
    matrix = np.zeros((len(gt), len(pred)))
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            matrix[i, j] = g.iou(p)
    return matrix


@dataclass(frozen=True)
class MatchResult:
    """
    Outcome of matching: `(gt_index, pred_index, iou)` pairs at or above the
    threshold, and the unmatched indices on either side.
    """

    pairs: Tuple[Tuple[int, int, float], ...]
    unmatched_gt: Tuple[int, ...]
    unmatched_pred: Tuple[int, ...]
    iou_threshold: float = DEFAULT_IOU_THRESHOLD


def match_detections(
    matrix: npt.ArrayLike,
    threshold: float = DEFAULT_IOU_THRESHOLD,
    eligibility: Eligibility = "assign_then_demote",
) -> MatchResult:
    """
    Optimal one-to-one matching minimizing the total `1 - IoU` over the
    cost matrix padded to square with zero-IoU dummies.

    With `"assign_then_demote"` matched pairs below `threshold` are split
    after assignment; with `"mask_then_assign"` sub-threshold entries are
    treated as zero IoU before assignment.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"Expected threshold in (0, 1], found {threshold}.")
    validate_choice(eligibility, ELIGIBILITY_RULES, "eligibility rule")
    ious = np.asarray(matrix, dtype=np.float64)
    if ious.ndim != 2:
        raise ValueError(f"Expected a 2D IoU matrix, found shape {ious.shape}.")
    n_gt, n_pred = ious.shape
    n = max(n_gt, n_pred)
    if n == 0:
        return MatchResult((), (), (), threshold)
    scores = np.zeros((n, n))
    scores[:n_gt, :n_pred] = ious
    if eligibility == "mask_then_assign":
        scores[scores < threshold] = 0.0
    rows, cols = linear_sum_assignment(1.0 - scores)
    pairs = []
    matched_gt, matched_pred = set(), set()
    for r, c in zip(rows, cols):
        if r < n_gt and c < n_pred and ious[r, c] >= threshold:
            pairs.append((int(r), int(c), float(ious[r, c])))
            matched_gt.add(int(r))
            matched_pred.add(int(c))
    return MatchResult(
        tuple(sorted(pairs)),
        tuple(i for i in range(n_gt) if i not in matched_gt),
        tuple(j for j in range(n_pred) if j not in matched_pred),
        threshold,
    )


@dataclass(frozen=True)
class MetricsReport:
    """
    Detection counts and the four metrics. Ratios with a zero denominator,
    and the quality of a report without true positives, are reported as 0
    with `degenerate` set.
    """

    tp: int
    fp: int
    fn: int
    jaccard: float
    precision: float
    recall: float
    quality: float
    threshold: float = DEFAULT_IOU_THRESHOLD
    degenerate: bool = False

    @property
    def as_dict(self) -> Dict[str, Union[int, float, bool]]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "jaccard": self.jaccard,
            "precision": self.precision,
            "recall": self.recall,
            "quality": self.quality,
            "threshold": self.threshold,
            "degenerate": self.degenerate,
        }


def _report(tp: int, fp: int, fn: int, ious: Sequence[float], threshold: float) -> MetricsReport:
    degenerate = False

    def ratio(num: float, den: float) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    jaccard = ratio(tp, tp + fp + fn)
    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    quality = ratio(float(np.sum(ious)), len(ious))
    return MetricsReport(tp, fp, fn, jaccard, precision, recall, quality, threshold, degenerate)


def compute_metrics(match: MatchResult) -> MetricsReport:
    """
    Jaccard index `TP/(TP+FP+FN)`, precision `TP/(TP+FP)`, recall
    `TP/(TP+FN)` and quality, the mean IoU of the true positives.
    """
    return _report(
        len(match.pairs),
        len(match.unmatched_pred),
        len(match.unmatched_gt),
        [iou for _, _, iou in match.pairs],
        match.iou_threshold,
    )


def pooled_metrics(matches: Iterable[MatchResult]) -> MetricsReport:
    """
    Metrics over several images, pooling TP/FP/FN counts and the IoUs of all
    true positives. All matches must share their threshold.
    """
    matches = list(matches)
    if not matches:
        raise ValueError("Cannot pool metrics over zero images.")
    thresholds = {m.iou_threshold for m in matches}
    if len(thresholds) != 1:
        raise ValueError(f"Matches use different thresholds: {sorted(thresholds)}.")
    ious: List[float] = [iou for m in matches for _, _, iou in m.pairs]
    return _report(
        sum(len(m.pairs) for m in matches),
        sum(len(m.unmatched_pred) for m in matches),
        sum(len(m.unmatched_gt) for m in matches),
        ious,
        thresholds.pop(),
    )
