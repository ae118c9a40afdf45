"""Prediction assembly and segmentation metrics (mIoU, PQ/SQ/RQ, similarity maps)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IGNORE
from .tensor import _sigmoid


@dataclass
class SemanticPrediction:
    labels: np.ndarray  # (H, W) indices into the evaluation class list
    scores: np.ndarray  # (|C|, H, W)


@dataclass
class PanopticSegment:
    id: int
    category: int
    score: float


@dataclass
class PanopticPrediction:
    segments: np.ndarray  # (H, W), 0 = unlabeled
    records: list[PanopticSegment] = field(default_factory=list)


def semantic_inference(S_cls: np.ndarray, mask_logits: np.ndarray) -> SemanticPrediction:
    """Per-pixel class score = sum over proposals of class score x mask probability."""
    S = np.asarray(S_cls, dtype=np.float64)
    N, H, W = mask_logits.shape
    probs = _sigmoid(np.asarray(mask_logits, dtype=np.float64)).reshape(N, H * W)
    scores = (S.T @ probs).reshape(S.shape[1], H, W)
    return SemanticPrediction(np.argmax(scores, axis=0), scores)


def panoptic_inference(
    S_cls: np.ndarray,
    mask_logits: np.ndarray,
    confidence: float = 0.5,
    overlap: float = 0.8,
    stuff: Sequence[int] = (),
) -> PanopticPrediction:
    """Greedy assembly: strongest proposals claim their pixels first."""
    S = np.asarray(S_cls)
    probs = _sigmoid(np.asarray(mask_logits, dtype=np.float64))
    N, H, W = probs.shape
    conf = S.max(axis=1)
    cls = S.argmax(axis=1)
    seg = np.zeros((H, W), dtype=np.int32)
    records: list[PanopticSegment] = []
    stuff_ids: dict[int, int] = {}
    stuff = set(stuff)
    for i in sorted(range(N), key=lambda k: (-conf[k], k)):
        if conf[i] < confidence:
            continue
        mask = probs[i] >= 0.5
        area = mask.sum()
        if area == 0:
            continue
        free = mask & (seg == 0)
        if free.sum() / area < overlap:
            continue
        c = int(cls[i])
        if c in stuff and c in stuff_ids:
            seg[free] = stuff_ids[c]
            continue
        sid = len(records) + 1
        seg[free] = sid
        records.append(PanopticSegment(sid, c, float(conf[i])))
        if c in stuff:
            stuff_ids[c] = sid
    return PanopticPrediction(seg, records)


# -- mIoU --------------------------------------------------------------------------


class ConfusionAccumulator:
    """Ground truth by prediction counts; the extra last column collects unlabeled predictions."""

    def __init__(self, num_classes: int):
        self.n = num_classes
        self.matrix = np.zeros((num_classes, num_classes + 1), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        valid = gt != IGNORE
        g = gt[valid].astype(np.int64)
        p = np.asarray(pred)[valid].astype(np.int64)
        if g.size and g.max() >= self.n:
            raise ValueError(f"ground-truth class {int(g.max())} outside the vocabulary")
        p = np.where((p < 0) | (p >= self.n), self.n, p)
        m = self.n + 1
        self.matrix += np.bincount(g * m + p, minlength=self.n * m).reshape(self.n, m)

    def per_class_iou(self) -> dict[int, float]:
        inter = np.diag(self.matrix[:, : self.n])
        union = self.matrix[:, : self.n].sum(0) + self.matrix.sum(1) - inter
        return {c: float(inter[c] / union[c]) for c in range(self.n) if union[c] > 0}

    def mean_iou(self, classes: Sequence[int] | None = None) -> float | None:
        ious = self.per_class_iou()
        keys = [c for c in (ious if classes is None else classes) if c in ious]
        return float(np.mean([ious[c] for c in keys])) if keys else None


def miou(pred, gt: np.ndarray, num_classes: int) -> tuple[dict[int, float], float | None]:
    """Per-class IoU and their mean over classes present in gt or prediction.

    Ignore-label pixels count toward neither side; with none left the mean is None.
    Predicted labels outside the vocabulary (unlabeled) are misses for the true class.
    """
    labels = pred.labels if isinstance(pred, SemanticPrediction) else pred
    acc = ConfusionAccumulator(num_classes)
    acc.update(labels, gt)
    return acc.per_class_iou(), acc.mean_iou()


# -- panoptic quality ----------------------------------------------------------


@dataclass
class PQStat:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "PQStat") -> None:
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def values(self) -> tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, sq, rq


def gt_segments(semantic: np.ndarray, instance: np.ndarray, stuff: Sequence[int] = ()) -> list[tuple[int, np.ndarray]]:
    """(class, mask) per thing instance plus one segment per present stuff class."""
    segs = []
    for iid in np.unique(instance):
        if iid == 0:
            continue
        m = instance == iid
        segs.append((int(semantic[m][0]), m))
    for c in stuff:
        m = (semantic == c) & (instance == 0)
        if m.any():
            segs.append((int(c), m))
    return segs


def pq_matching(pred: PanopticPrediction, gts: Sequence[tuple[int, np.ndarray]]) -> dict[int, PQStat]:
    """Per-class TP/FP/FN with same-class IoU > 0.5 matching (unique by construction)."""
    stats: dict[int, PQStat] = {}
    matched_pred: set[int] = set()
    for c, gmask in gts:
        st = stats.setdefault(c, PQStat())
        hit = None
        for rec in pred.records:
            if rec.category != c or rec.id in matched_pred:
                continue
            pmask = pred.segments == rec.id
            inter = np.logical_and(pmask, gmask).sum()
            union = np.logical_or(pmask, gmask).sum()
            iou = inter / union if union else 0.0
            if iou > 0.5:
                if hit is not None:
                    raise AssertionError("two predictions matched one ground-truth segment")
                hit = (rec.id, iou)
        if hit is None:
            st.fn += 1
        else:
            matched_pred.add(hit[0])
            st.tp += 1
            st.iou_sum += float(hit[1])
    for rec in pred.records:
        if rec.id not in matched_pred:
            stats.setdefault(rec.category, PQStat()).fp += 1
    return stats


def pq_sq_rq(pred: PanopticPrediction, gts: Sequence[tuple[int, np.ndarray]]) -> tuple[float, float, float]:
    total = PQStat()
    for st in pq_matching(pred, gts).values():
        total.add(st)
    return total.values()


# -- similarity maps ----------------------------------------------------------


@dataclass
class SimilarityMatrix:
    classes: list[str]
    values: np.ndarray  # (|C|, |C|) rows: vision class, cols: text class
    missing: list[str] = field(default_factory=list)

    def diagonal_mean(self) -> float:
        idx = [i for i, c in enumerate(self.classes) if c not in self.missing]
        return float(np.mean(self.values[idx, idx]))


def normalize_similarity(raw: np.ndarray) -> np.ndarray:
    finite = raw[np.isfinite(raw)]
    lo, hi = finite.min(), finite.max()
    out = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    return np.where(np.isfinite(raw), out, np.nan)


# -- reports -------------------------------------------------------------------------


def write_metrics_csv(path: str | Path, rows: list[dict], summary: dict) -> None:
    fields = list(rows[0].keys()) if rows else list(summary.keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        writer.writerow({k: summary.get(k, "") for k in fields})
