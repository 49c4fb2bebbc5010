"""Detection and retrieval metrics.

* ``voc_detection_ap``: PASCAL VOC style AP at an IoU threshold, class-aware
  (bbox-based AP) or class-agnostic (generic logo detection).
* ``image_based_ap``: one maximum-score detection per (image, class), correct
  when the class occurs anywhere in the image's ground truth.
* ``recall_at_k``: fraction of queries with a relevant item in the top K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

SCHEMA_VERSION = 1
AGNOSTIC = "all"

PROTOCOL_BBOX = "bbox-based"
PROTOCOL_IMAGE = "image-based"
PROTOCOL_GENERIC = "generic"


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def of(cls, x1, y1, x2, y2) -> "BoundingBox":
        box = cls(x1, y1, x2, y2)
        if not (box.x2 > box.x1 and box.y2 > box.y1):
            raise ValueError(f"box {tuple(box)} has non-positive area")
        return box

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_ints(self) -> tuple[int, int, int, int]:
        return tuple(int(v) for v in self)


class Detection(NamedTuple):
    box: BoundingBox
    score: float
    class_id: int | None = None


class GroundTruthBox(NamedTuple):
    box: BoundingBox
    class_id: int | None = None


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def average_precision(tp: Sequence[bool], n_positives: int, use_11_point: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """AP from a ranked TP/FP sequence; returns (ap, recall, precision)."""
    tp = np.asarray(tp, dtype=float)
    if n_positives == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_positives
    prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    if use_11_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = prec[rec >= t].max() if np.any(rec >= t) else 0.0
            ap += p / 11.0
        return float(ap), rec, prec
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1])), rec, prec


@dataclass
class EvalReport:
    protocol: str
    per_class_ap: dict
    mean_ap: float
    recall: float
    n_images: int
    n_ground_truth: int
    n_detections: int
    excluded_classes: list = field(default_factory=list)
    iou_threshold: float | None = None
    # Per-class (recall, precision) arrays for plotting; not serialised.
    curves: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "protocol": self.protocol,
            "iou_threshold": self.iou_threshold,
            "mAP": self.mean_ap,
            "recall": self.recall,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "excluded_classes": [str(c) for c in self.excluded_classes],
            "counts": {
                "images": self.n_images,
                "ground_truth": self.n_ground_truth,
                "detections": self.n_detections,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _class_key(c):
    return (0, c) if isinstance(c, (int, np.integer)) else (1, str(c))


def voc_detection_ap(
    detections: Mapping[Hashable, Sequence[Detection]],
    ground_truth: Mapping[Hashable, Sequence[GroundTruthBox]],
    iou_threshold: float = 0.5,
    class_aware: bool = True,
    use_11_point: bool = False,
) -> EvalReport:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    images = list(dict.fromkeys([*ground_truth.keys(), *detections.keys()]))

    def key(c):
        if not class_aware:
            return AGNOSTIC
        if c is None:
            raise ValueError("class-aware evaluation needs labels on every box")
        return c

    gt_by = {}  # class -> image -> list of boxes
    for img in images:
        for g in ground_truth.get(img, ()):
            gt_by.setdefault(key(g.class_id), {}).setdefault(img, []).append(g.box)
    det_by = {}  # class -> list of (score, box, image) in input order
    n_det = 0
    for img in images:
        for d in detections.get(img, ()):
            det_by.setdefault(key(d.class_id), []).append((float(d.score), d.box, img))
            n_det += 1

    per_class, curves = {}, {}
    total_tp = 0
    for c in sorted(set(gt_by) | set(det_by), key=_class_key):
        gts = gt_by.get(c, {})
        n_pos = sum(len(v) for v in gts.values())
        if n_pos == 0:
            continue
        dets = det_by.get(c, [])
        order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
        claimed = {img: [False] * len(v) for img, v in gts.items()}
        tp = []
        for i in order:
            _, box, img = dets[i]
            best, best_j = -1.0, -1
            for j, g in enumerate(gts.get(img, ())):
                if claimed[img][j]:
                    continue
                o = iou(box, g)
                if o >= iou_threshold and o > best:
                    best, best_j = o, j
            if best_j >= 0:
                claimed[img][best_j] = True
            tp.append(best_j >= 0)
        ap, rec, prec = average_precision(tp, n_pos, use_11_point)
        per_class[c] = ap
        curves[c] = (rec, prec)
        total_tp += int(sum(tp))

    excluded = sorted((c for c in det_by if c not in per_class), key=_class_key)
    n_gt = sum(len(v) for v in ground_truth.values())
    return EvalReport(
        protocol=PROTOCOL_BBOX if class_aware else PROTOCOL_GENERIC,
        per_class_ap=per_class,
        mean_ap=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        recall=total_tp / n_gt if n_gt else 0.0,
        n_images=len(images),
        n_ground_truth=n_gt,
        n_detections=n_det,
        excluded_classes=excluded,
        iou_threshold=iou_threshold,
        curves=curves,
    )


def image_based_ap(
    detections: Mapping[Hashable, Iterable[tuple[int, float]]],
    ground_truth: Mapping[Hashable, Iterable[int]],
    use_11_point: bool = False,
) -> EvalReport:
    """``detections`` maps image -> (class_id, score) pairs; ``ground_truth`` image -> labels.

    ``Detection`` tuples are accepted too (their box is ignored).
    """
    images = list(dict.fromkeys([*ground_truth.keys(), *detections.keys()]))
    gt_sets = {img: set(ground_truth.get(img, ())) for img in images}

    best = {}  # (image, class) -> score; first of equal scores wins
    n_det = 0
    for img in images:
        for d in detections.get(img, ()):
            c, s = (d.class_id, d.score) if isinstance(d, Detection) else d
            n_det += 1
            if (img, c) not in best or s > best[(img, c)]:
                best[(img, c)] = float(s)

    by_class = {}
    for (img, c), s in best.items():
        by_class.setdefault(c, []).append((s, img))
    positives = {}
    for img in images:
        for c in gt_sets[img]:
            positives[c] = positives.get(c, 0) + 1

    per_class, curves = {}, {}
    total_tp = 0
    for c in sorted(set(positives) | set(by_class), key=_class_key):
        n_pos = positives.get(c, 0)
        if n_pos == 0:
            continue
        preds = by_class.get(c, [])
        order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
        claimed = set()
        tp = []
        for i in order:
            img = preds[i][1]
            hit = c in gt_sets[img] and img not in claimed
            if hit:
                claimed.add(img)
            tp.append(hit)
        ap, rec, prec = average_precision(tp, n_pos, use_11_point)
        per_class[c] = ap
        curves[c] = (rec, prec)
        total_tp += len(claimed)

    n_gt = sum(positives.values())
    return EvalReport(
        protocol=PROTOCOL_IMAGE,
        per_class_ap=per_class,
        mean_ap=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        recall=total_tp / n_gt if n_gt else 0.0,
        n_images=len(images),
        n_ground_truth=n_gt,
        n_detections=n_det,
        excluded_classes=sorted((c for c in by_class if c not in per_class), key=_class_key),
        curves=curves,
    )


@dataclass
class RecallReport:
    recall: dict
    n_queries: int
    n_excluded: int


def recall_at_k(
    rankings: Sequence[Sequence[Hashable]],
    relevant: Sequence[Iterable[Hashable]],
    ks: Sequence[int] = (1, 2, 4, 8),
) -> RecallReport:
    """Recall@K over ranked result lists; queries without relevant items are excluded."""
    if any(k < 1 for k in ks):
        raise ValueError("k must be >= 1")
    hits = {k: 0 for k in ks}
    counted = excluded = 0
    for ranked, rel in zip(rankings, relevant):
        rel = set(rel)
        if not rel:
            excluded += 1
            continue
        counted += 1
        first = next((i for i, r in enumerate(ranked) if r in rel), None)
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    recall = {k: (hits[k] / counted if counted else float("nan")) for k in ks}
    return RecallReport(recall, counted, excluded)
