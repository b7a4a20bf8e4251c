"""Retrieval (mAP, CMC) and detection (IoU, AP, recall) metrics."""

from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import validate_box
from .errors import EmptySetError, NoPositiveError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedResult:
    query_id: int
    gallery_ids: tuple[int, ...]
    relevant: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "gallery_ids", tuple(int(g) for g in self.gallery_ids))
        object.__setattr__(self, "relevant", tuple(bool(r) for r in self.relevant))
        if len(self.relevant) != len(self.gallery_ids):
            raise ValidationError(
                f"query {self.query_id}: {len(self.relevant)} flags for "
                f"{len(self.gallery_ids)} gallery ids"
            )


@dataclass(frozen=True)
class BoxRecord:
    """A detection (``score`` set) or a ground-truth box (``identity`` set)."""

    frame_id: int
    box: tuple[float, float, float, float]
    score: float = 1.0
    identity: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "box", validate_box(self.box))


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = validate_box(a)
    bx1, by1, bx2, by2 = validate_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _score_order(dets: Sequence[BoxRecord]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[BoxRecord], gts: Sequence[BoxRecord],
                     threshold: float = 0.5) -> list[Optional[int]]:
    """Greedy matching in descending detection score, per frame.

    Returns, for each detection in input order, the index of its matched
    ground-truth box or ``None``.
    """
    matches: list[Optional[int]] = [None] * len(dets)
    taken = [False] * len(gts)
    by_frame: dict[int, list[int]] = {}
    for gi, gt in enumerate(gts):
        by_frame.setdefault(gt.frame_id, []).append(gi)
    for di in _score_order(dets):
        det = dets[di]
        best, best_iou = None, -1.0
        for gi in by_frame.get(det.frame_id, ()):
            if taken[gi]:
                continue
            ov = iou(det.box, gts[gi].box)
            if ov >= threshold and ov > best_iou:
                best, best_iou = gi, ov
        if best is not None:
            taken[best] = True
            matches[di] = best
    return matches


def average_precision_from_flags(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP for score-sorted true-positive flags."""
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detection_ap_recall(dets: Sequence[BoxRecord], gts: Sequence[BoxRecord],
                        threshold: float = 0.5) -> tuple[float, float]:
    if not gts:
        raise EmptySetError("detection AP needs at least one ground-truth box")
    matches = match_detections(dets, gts, threshold)
    flags = [matches[i] is not None for i in _score_order(dets)]
    n_matched = sum(flags)
    return average_precision_from_flags(flags, len(gts)), n_matched / len(gts)


def retrieval_ap(result: RankedResult) -> float:
    rel = np.asarray(result.relevant, dtype=bool)
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise NoPositiveError(f"query {result.query_id} has no positive in its gallery")
    # exact rational sum, rounded once, so hand values like 5/6 come out exact
    ranks = np.flatnonzero(rel) + 1
    total = sum(Fraction(hit, int(rank)) for hit, rank in enumerate(ranks, start=1))
    return float(total / n_pos)


def map_and_cmc(results: Sequence[RankedResult], ks: Sequence[int] = (1, 5, 10)):
    """Mean AP and rank-k accuracy over queries that have a positive.

    Returns ``(mAP, {k: rank-k}, excluded)`` where ``excluded`` counts the
    queries skipped for lacking a positive.
    """
    aps = []
    hits = {k: 0 for k in ks}
    excluded = 0
    for res in results:
        try:
            aps.append(retrieval_ap(res))
        except NoPositiveError:
            excluded += 1
            continue
        first = next(i for i, r in enumerate(res.relevant) if r)
        for k in ks:
            if first < k:
                hits[k] += 1
    if not aps:
        raise EmptySetError("no query has a positive in its gallery")
    if excluded:
        log.warning("%d queries without positives excluded from mAP", excluded)
    n = len(aps)
    return float(np.mean(aps)), {k: hits[k] / n for k in ks}, excluded


def ranked_results(query_ids, query_labels, query_frames, gallery_ids, gallery_labels,
                   gallery_frames, rankings, exclude_same_frame: bool = True) -> list[RankedResult]:
    """Attach relevance flags to ranked gallery index lists.

    ``rankings[q]`` holds gallery positions in ranked order. Gallery items
    from the query's own frame are dropped when ``exclude_same_frame``.
    Unlabeled queries (label < 0) are skipped.
    """
    out = []
    g_ids = np.asarray(gallery_ids)
    g_labels = np.asarray(gallery_labels)
    g_frames = np.asarray(gallery_frames)
    for q, order in enumerate(rankings):
        if query_labels[q] < 0:
            continue
        order = np.asarray(order)
        if exclude_same_frame:
            order = order[g_frames[order] != query_frames[q]]
        rel = (g_labels[order] == query_labels[q]) & (g_labels[order] >= 0)
        out.append(RankedResult(int(query_ids[q]), tuple(g_ids[order]), tuple(rel)))
    return out
