"""COCO-protocol detection scoring.

Greedy same-class IoU matching per image, 101-point interpolated average
precision over the 0.50:0.05:0.95 threshold ladder, and size-bucket
summaries. Size buckets filter both ground truth and detections by box area
(small < 32^2, medium in [32^2, 96^2), large above), a documented
simplification of the official crowd/ignore machinery. Classes without any
ground truth are excluded from the class mean; an empty bucket scores 0.

Ground truth rides a JSON-lines file of ``{"image", "box", "class"}``
objects; detections add a ``"score"`` field and carry 6-decimal pixel boxes.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

__all__ = [
    "IOU_THRESHOLDS",
    "SMALL_MAX_AREA",
    "MEDIUM_MAX_AREA",
    "GroundTruth",
    "DetRecord",
    "MatchResult",
    "ApSummary",
    "iou",
    "match_greedy",
    "average_precision",
    "summarize",
    "read_ground_truth",
    "read_detections",
    "write_detections",
    "detection_line",
]

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
SMALL_MAX_AREA = 32.0**2
MEDIUM_MAX_AREA = 96.0**2
Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    image: str
    box: Box
    class_id: int

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate ground-truth box {self.box}")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True)
class DetRecord:
    image: str
    box: Box
    class_id: int
    score: float

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-form boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError(f"degenerate box in iou: {tuple(a)} vs {tuple(b)}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _det_degenerate(box: Box) -> bool:
    return box[2] <= box[0] or box[3] <= box[1]


@dataclass(frozen=True)
class MatchResult:
    """Per-detection outcome for one image at one threshold, score order."""

    scores: tuple[float, ...]
    matched: tuple[bool, ...]
    num_gt: int


def match_greedy(
    dets: Sequence[DetRecord], gts: Sequence[GroundTruth], threshold: float
) -> MatchResult:
    """Match detections (already sorted by descending score) greedily.

    Each detection takes the unmatched same-class ground truth with the
    highest IoU at or above the threshold; equal IoU falls to the earlier
    ground truth. Unmatched detections are false positives. Degenerate
    detection boxes never match.
    """
    taken = [False] * len(gts)
    matched = []
    for d in dets:
        best_j = -1
        best_iou = 0.0
        if not _det_degenerate(d.box):
            for j, g in enumerate(gts):
                if taken[j] or g.class_id != d.class_id:
                    continue
                v = iou(d.box, g.box)
                if v >= threshold and v > best_iou:
                    best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            matched.append(True)
        else:
            matched.append(False)
    return MatchResult(tuple(d.score for d in dets), tuple(matched), len(gts))


def average_precision(
    matched: Sequence[bool], num_gt: int, recall_points: int = 101
) -> float:
    """Interpolated AP: monotone precision envelope sampled on a uniform
    recall grid (inclusive of 0 and 1)."""
    if num_gt == 0 or not matched:
        return 0.0
    flags = np.asarray(matched, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass(frozen=True)
class ApSummary:
    iou_thresholds: tuple[float, ...]
    per_class: Mapping[int, tuple[float, ...]]
    ap50: float
    ap75: float
    ap50_95: float
    ap_small: float
    ap_medium: float
    ap_large: float

    def to_json(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "per_class": {str(c): list(v) for c, v in sorted(self.per_class.items())},
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP50_95": self.ap50_95,
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
        }

    def to_text(self) -> str:
        lines = [
            f"AP50    {self.ap50:.4f}",
            f"AP75    {self.ap75:.4f}",
            f"AP50:95 {self.ap50_95:.4f}",
            f"AP_S    {self.ap_small:.4f}",
            f"AP_M    {self.ap_medium:.4f}",
        ]
        for c, values in sorted(self.per_class.items()):
            mean = sum(values) / len(values)
            lines.append(f"class {c}: AP50 {values[0]:.4f}  AP50:95 {mean:.4f}")
        return "\n".join(lines)


def _thread_cap() -> int:
    raw = os.environ.get("COLLABOD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _pooled_flags(
    dets_by_image: Mapping[str, list[DetRecord]],
    gts_by_image: Mapping[str, list[GroundTruth]],
    class_id: int,
    threshold: float,
) -> tuple[list[tuple[float, int, bool]], int]:
    pooled: list[tuple[float, int, bool]] = []
    num_gt = 0
    order = 0
    for image in sorted(set(dets_by_image) | set(gts_by_image)):
        dets = [d for d in dets_by_image.get(image, []) if d.class_id == class_id]
        gts = [g for g in gts_by_image.get(image, []) if g.class_id == class_id]
        num_gt += len(gts)
        result = match_greedy(dets, gts, threshold)
        for score, flag in zip(result.scores, result.matched):
            pooled.append((score, order, flag))
            order += 1
    return pooled, num_gt


def _class_ap_ladder(
    dets_by_image: Mapping[str, list[DetRecord]],
    gts_by_image: Mapping[str, list[GroundTruth]],
    class_id: int,
    thresholds: Sequence[float],
) -> tuple[float, ...]:
    aps = []
    for t in thresholds:
        pooled, num_gt = _pooled_flags(dets_by_image, gts_by_image, class_id, t)
        # Ties across images break by pooling order, itself fixed by the
        # sorted image walk: evaluation is permutation-invariant in the input.
        pooled.sort(key=lambda r: (-r[0], r[1]))
        aps.append(average_precision([flag for _, _, flag in pooled], num_gt))
    return tuple(aps)


def _evaluate(
    dets: Sequence[DetRecord],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float],
    max_dets: int,
) -> dict[int, tuple[float, ...]]:
    dets_by_image: dict[str, list[DetRecord]] = {}
    for d in dets:
        dets_by_image.setdefault(d.image, []).append(d)
    for image, group in dets_by_image.items():
        group.sort(key=lambda d: -d.score)  # stable: input order breaks ties
        del group[max_dets:]
    gts_by_image: dict[str, list[GroundTruth]] = {}
    for g in gts:
        gts_by_image.setdefault(g.image, []).append(g)

    classes = sorted({g.class_id for g in gts})
    cap = _thread_cap()
    if cap > 1 and len(classes) > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            ladders = list(
                pool.map(
                    lambda c: _class_ap_ladder(dets_by_image, gts_by_image, c, thresholds),
                    classes,
                )
            )
        return dict(zip(classes, ladders))
    return {
        c: _class_ap_ladder(dets_by_image, gts_by_image, c, thresholds) for c in classes
    }


def _mean_over_thresholds(per_class: Mapping[int, tuple[float, ...]], count: int) -> list[float]:
    if not per_class:
        return [0.0] * count
    return [
        sum(values[i] for values in per_class.values()) / len(per_class)
        for i in range(count)
    ]


def _area_bucket(dets, gts, lo: float, hi: float, thresholds, max_dets) -> float:
    bucket_gts = [g for g in gts if lo <= g.area < hi]
    bucket_dets = [d for d in dets if lo <= d.area < hi]
    per_class = _evaluate(bucket_dets, bucket_gts, thresholds, max_dets)
    return float(np.mean(_mean_over_thresholds(per_class, len(thresholds)))) if per_class else 0.0


def summarize(
    dets: Sequence[DetRecord],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = 100,
) -> ApSummary:
    """Full evaluation: the threshold ladder per class plus size buckets."""
    thresholds = tuple(iou_thresholds)
    per_class = _evaluate(dets, gts, thresholds, max_dets)
    per_threshold = _mean_over_thresholds(per_class, len(thresholds))
    by_value = dict(zip(thresholds, per_threshold))
    return ApSummary(
        iou_thresholds=thresholds,
        per_class=per_class,
        ap50=by_value.get(0.5, 0.0),
        ap75=by_value.get(0.75, 0.0),
        ap50_95=float(np.mean(per_threshold)) if per_threshold else 0.0,
        ap_small=_area_bucket(dets, gts, 0.0, SMALL_MAX_AREA, thresholds, max_dets),
        ap_medium=_area_bucket(dets, gts, SMALL_MAX_AREA, MEDIUM_MAX_AREA, thresholds, max_dets),
        ap_large=_area_bucket(dets, gts, MEDIUM_MAX_AREA, float("inf"), thresholds, max_dets),
    )


# ---------------------------------------------------------------------------
# JSON-lines io
# ---------------------------------------------------------------------------


def read_ground_truth(path: str) -> list[GroundTruth]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    GroundTruth(str(obj["image"]), tuple(float(v) for v in obj["box"]), int(obj["class"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad ground-truth record: {exc}") from None
    return records


def read_detections(path: str) -> list[DetRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    DetRecord(
                        str(obj["image"]),
                        tuple(float(v) for v in obj["box"]),
                        int(obj["class"]),
                        float(obj["score"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from None
    return records


def detection_line(rec: DetRecord) -> str:
    return json.dumps(
        {
            "image": rec.image,
            "box": [round(float(v), 6) for v in rec.box],
            "class": rec.class_id,
            "score": round(float(rec.score), 6),
        }
    )


def write_detections(f: TextIO, records: Iterable[DetRecord]) -> None:
    for rec in records:
        f.write(detection_line(rec) + "\n")
