"""Panoptic post-processing and the PQ / SQ / RQ evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import _kernels
from .tensor import DenseArray

__all__ = [
    "Prediction",
    "PanopticMap",
    "PQResult",
    "PQAccumulator",
    "pixelwise_argmax",
    "maskwise_merge",
    "panoptic_quality",
]


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, DenseArray) else np.asarray(x)


@dataclass
class Prediction:
    """N soft masks over a ``height x width`` raster plus per-query class distributions.

    ``Z`` is (height*width) x N with rows summing to 1; ``class_probs`` is
    N x (num_classes + 1) with the void class in the last column. Either
    field may be a ``DenseArray`` (training) or a plain array (inference).
    ``logits`` and ``class_logits`` optionally carry the pre-softmax values.
    """

    Z: object
    class_probs: object
    height: int
    width: int
    logits: object = None
    class_logits: object = None

    def __post_init__(self):
        z = _np(self.Z)
        if z.ndim != 2 or z.shape[0] != self.height * self.width:
            raise ValueError(f"Z has shape {z.shape}, expected ({self.height * self.width}, N)")
        if _np(self.class_probs).shape[0] != z.shape[1]:
            raise ValueError("class_probs must have one row per query")

    @property
    def num_queries(self) -> int:
        return _np(self.Z).shape[1]

    @property
    def void_class(self) -> int:
        return _np(self.class_probs).shape[1] - 1

    def validate(self, tol: float = 1e-6) -> None:
        z, p = _np(self.Z), _np(self.class_probs)
        if np.abs(z.sum(axis=1) - 1).max() > tol or np.abs(p.sum(axis=1) - 1).max() > tol:
            raise ValueError("Prediction rows must sum to 1")


@dataclass
class PanopticMap:
    """Raster of segment ids (0 = void) plus the class of every segment."""

    segment_id: np.ndarray
    segments: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.segment_id = np.asarray(self.segment_id, dtype=np.int32)
        ids = [s for s, _ in self.segments]
        if len(set(ids)) != len(ids) or any(s <= 0 for s in ids):
            raise ValueError("segment ids must be unique and positive")
        present = set(np.unique(self.segment_id).tolist()) - {0}
        missing = present - set(ids)
        if missing:
            raise ValueError(f"raster ids {sorted(missing)} have no segment entry")

    @property
    def shape(self) -> tuple[int, int]:
        return self.segment_id.shape

    def class_of(self) -> dict[int, int]:
        return dict(self.segments)

    def relabel(self) -> "PanopticMap":
        """Drop segments without pixels and renumber the rest 1..K in order."""
        present = set(np.unique(self.segment_id).tolist())
        kept = [(s, c) for s, c in self.segments if s in present]
        lut = np.zeros(max([s for s, _ in self.segments], default=0) + 1, dtype=np.int32)
        for new, (s, _) in enumerate(kept, start=1):
            lut[s] = new
        return PanopticMap(lut[self.segment_id], [(i, c) for i, (_, c) in enumerate(kept, start=1)])


def _raster_from_owner(owner: np.ndarray, keep_class: dict[int, int], shape, stuff_classes) -> PanopticMap:
    """Turn a per-pixel query index (-1 = void) into a PanopticMap.

    Queries are numbered in ascending index order; queries whose class is in
    ``stuff_classes`` share one segment per class.
    """
    seg = np.zeros(owner.shape, dtype=np.int32)
    segments: list[tuple[int, int]] = []
    stuff_ids: dict[int, int] = {}
    present = set(np.unique(owner).tolist()) - {-1}
    for q in sorted(present):
        cls = keep_class[q]
        if cls in stuff_classes and cls in stuff_ids:
            sid = stuff_ids[cls]
        else:
            sid = len(segments) + 1
            segments.append((sid, cls))
            if cls in stuff_classes:
                stuff_ids[cls] = sid
        seg[owner == q] = sid
    return PanopticMap(seg.reshape(shape), segments)


def pixelwise_argmax(pred: Prediction, conf_threshold: float = 0.7, stuff_classes: Iterable[int] = ()) -> PanopticMap:
    """Each pixel goes to its most likely query; unconfident or void queries become void."""
    z, probs = _np(pred.Z), _np(pred.class_probs)
    cls = probs.argmax(axis=1)
    conf = probs[np.arange(len(cls)), cls]
    valid = (cls != pred.void_class) & (conf >= conf_threshold)
    owner = z.argmax(axis=1)
    owner = np.where(valid[owner], owner, -1)
    keep = {int(q): int(cls[q]) for q in np.nonzero(valid)[0]}
    return _raster_from_owner(owner, keep, (pred.height, pred.width), set(stuff_classes))


def maskwise_merge(
    pred: Prediction,
    object_threshold: float = 0.7,
    overlap_threshold: float = 0.5,
    stuff_classes: Iterable[int] = (),
) -> PanopticMap:
    """Confidence-ranked merge.

    1. keep queries whose best non-void class probability reaches ``object_threshold``;
    2. assign each pixel to the kept query maximizing ``confidence * Z``;
    3. void the segments whose retained area is below ``overlap_threshold``
       times the area where that query's own mask is >= 0.5.
    """
    z, probs = _np(pred.Z), _np(pred.class_probs)
    things = probs[:, : pred.void_class]
    cls = things.argmax(axis=1)
    score = things[np.arange(len(cls)), cls]
    kept = np.nonzero(score >= object_threshold)[0]
    shape = (pred.height, pred.width)
    if kept.size == 0:
        return PanopticMap(np.zeros(shape, dtype=np.int32), [])
    weighted = z[:, kept] * score[kept]
    owner = kept[weighted.argmax(axis=1)]
    for q in kept:
        mine = owner == q
        area = int(mine.sum())
        if area == 0:
            continue
        if overlap_threshold > 0:
            original = int((z[:, q] >= 0.5).sum())
            if original == 0 or area / original < overlap_threshold:
                owner[mine] = -1
    keep = {int(q): int(cls[q]) for q in kept}
    return _raster_from_owner(owner, keep, shape, set(stuff_classes))


# --------------------------------------------------------------------------
# Panoptic quality
# --------------------------------------------------------------------------


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    pq_thing: float
    pq_stuff: float
    per_class: dict[int, dict[str, float]]


class PQAccumulator:
    """Per-class IoU sums and TP/FP/FN counts, accumulated over images."""

    def __init__(self, thing_classes: Iterable[int] = ()):
        self.thing_classes = set(thing_classes)
        self.iou: dict[int, float] = {}
        self.tp: dict[int, int] = {}
        self.fp: dict[int, int] = {}
        self.fn: dict[int, int] = {}

    def _bump(self, table, cls, amount):
        table[cls] = table.get(cls, 0) + amount
        for t in (self.iou, self.tp, self.fp, self.fn):
            t.setdefault(cls, 0)

    def add(self, pred_map: PanopticMap, gt: PanopticMap) -> None:
        if pred_map.shape != gt.shape:
            raise ValueError(f"raster dimensions differ: {pred_map.shape} vs {gt.shape}")
        gt_ids = gt.segment_id.ravel()
        pr_ids = pred_map.segment_id.ravel()
        ng = int(max(gt_ids.max(initial=0), max((s for s, _ in gt.segments), default=0))) + 1
        npr = int(max(pr_ids.max(initial=0), max((s for s, _ in pred_map.segments), default=0))) + 1
        counts = _kernels.pair_counts(gt_ids, pr_ids, ng, npr)
        gt_area = counts.sum(axis=1)
        pr_area = counts.sum(axis=0)
        gt_cls, pr_cls = gt.class_of(), pred_map.class_of()
        matched_gt, matched_pr = set(), set()
        for g, gc in gt_cls.items():
            for p, pc in pr_cls.items():
                if gc != pc:
                    continue
                inter = counts[g, p]
                if inter == 0:
                    continue
                union = gt_area[g] + pr_area[p] - inter - counts[0, p]
                iou = inter / union
                if iou > 0.5:
                    matched_gt.add(g)
                    matched_pr.add(p)
                    self._bump(self.tp, gc, 1)
                    self._bump(self.iou, gc, float(iou))
        for g, gc in gt_cls.items():
            if g not in matched_gt and gt_area[g] > 0:
                self._bump(self.fn, gc, 1)
        for p, pc in pr_cls.items():
            if p in matched_pr or pr_area[p] == 0:
                continue
            # predictions lying mostly on unlabeled ground truth are not penalized
            if counts[0, p] / pr_area[p] > 0.5:
                continue
            self._bump(self.fp, pc, 1)

    def result(self) -> PQResult:
        per_class = {}
        for c in sorted(self.tp):
            tp, fp, fn = self.tp[c], self.fp[c], self.fn[c]
            if tp + fp + fn == 0:
                continue
            sq = self.iou[c] / tp if tp else 0.0
            rq = tp / (tp + 0.5 * fp + 0.5 * fn)
            per_class[c] = {"pq": sq * rq, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn}

        def avg(key, classes):
            vals = [per_class[c][key] for c in classes]
            return float(sum(vals) / len(vals)) if vals else float("nan")

        all_c = list(per_class)
        things = [c for c in all_c if c in self.thing_classes]
        stuff = [c for c in all_c if c not in self.thing_classes]
        return PQResult(
            pq=avg("pq", all_c),
            sq=avg("sq", all_c),
            rq=avg("rq", all_c),
            pq_thing=avg("pq", things),
            pq_stuff=avg("pq", stuff),
            per_class=per_class,
        )


def panoptic_quality(pred_map: PanopticMap, gt: PanopticMap, thing_classes: Iterable[int] = ()) -> PQResult:
    acc = PQAccumulator(thing_classes)
    acc.add(pred_map, gt)
    return acc.result()
