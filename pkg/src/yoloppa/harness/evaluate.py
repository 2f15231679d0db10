"""Precision / recall / mAP@0.5 with all-point interpolated AP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..types import Detection, GroundTruthBox, iou_matrix


@dataclass
class ClassStats:
    num_gt: int
    ap: Optional[float]  # None when the class has no ground truth
    tp: int = 0  # at the selected confidence threshold
    fp: int = 0
    fn: int = 0

    @property
    def recall(self) -> Optional[float]:
        return self.tp / self.num_gt if self.num_gt else None

    @property
    def precision(self) -> Optional[float]:
        n = self.tp + self.fp
        return self.tp / n if n else None


@dataclass
class EvalReport:
    per_class: Dict[int, ClassStats]
    mAP: float
    precision: float
    recall: float
    f1: float
    threshold: Optional[float]
    iou_threshold: float = 0.5
    num_images: int = 0
    split_boundary: Optional[str] = None
    class_names: Optional[list] = None

    def ap(self, cls: int) -> Optional[float]:
        return self.per_class[cls].ap

    def recall_of(self, cls: int) -> Optional[float]:
        return self.per_class[cls].recall

    def _name(self, c: int) -> str:
        if self.class_names and c < len(self.class_names):
            return self.class_names[c]
        return str(c)

    def rows(self) -> list:
        rows = []
        for c, s in sorted(self.per_class.items()):
            rows.append([self._name(c), s.num_gt, _fmt(s.ap), s.tp, s.fp, s.fn, _fmt(s.precision), _fmt(s.recall)])
        rows.append(["all", sum(s.num_gt for s in self.per_class.values()), _fmt(self.mAP),
                     sum(s.tp for s in self.per_class.values()), sum(s.fp for s in self.per_class.values()),
                     sum(s.fn for s in self.per_class.values()), _fmt(self.precision), _fmt(self.recall)])
        return rows

    HEADER = ["class", "gts", "AP50", "tp", "fp", "fn", "precision", "recall"]

    def table(self) -> str:
        rows = [self.HEADER] + [[str(v) for v in r] for r in self.rows()]
        widths = [max(len(r[i]) for r in rows) for i in range(len(self.HEADER))]
        lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        thr = "n/a" if self.threshold is None else f"{self.threshold:.6g}"
        lines.append(f"mAP@{self.iou_threshold:g} = {self.mAP:.4f}   P = {self.precision:.4f}   "
                     f"R = {self.recall:.4f}   F1 = {self.f1:.4f}   at confidence >= {thr}")
        if self.split_boundary is not None:
            lines.append(f"validation split starts at {self.split_boundary}")
        return "\n".join(lines)

    def to_delimited(self, sep: str = ",") -> str:
        out = [sep.join(self.HEADER)] + [sep.join(str(v) for v in r) for r in self.rows()]
        out.append(sep.join(["f1", _fmt(self.f1), "threshold", "" if self.threshold is None else repr(self.threshold)]))
        if self.split_boundary is not None:
            out.append(sep.join(["split_boundary", self.split_boundary]))
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def all_point_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """Area under the precision envelope of a ranked TP/FP list."""
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    n = np.arange(1, len(tp) + 1, dtype=np.float64)
    rec = np.concatenate([[0.0], tp / num_gt, [1.0]])
    prec = np.concatenate([[0.0], tp / n if len(tp) else [], [0.0]])
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    idx = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[idx + 1] - rec[idx]) * prec[idx + 1]))


@dataclass
class _Ranked:
    conf: float
    image: int
    index: int
    cls: int
    tp: bool = False


def match_detections(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthBox]],
                     cls: int, iou_threshold: float = 0.5) -> List[_Ranked]:
    """Rank class ``cls`` detections globally and mark each TP or FP."""
    ranked = [_Ranked(d.confidence, i, j, cls) for i, img in enumerate(dets)
              for j, d in enumerate(img) if d.cls == cls]
    ranked.sort(key=lambda r: (-r.conf, r.image, r.index))
    gt_boxes = {}
    used = {}
    for i, img in enumerate(gts):
        idx = [k for k, g in enumerate(img) if g.cls == cls]
        gt_boxes[i] = np.array([img[k].box.as_array() for k in idx]).reshape(-1, 4)
        used[i] = np.zeros(len(idx), dtype=bool)
    for r in ranked:
        g = gt_boxes[r.image]
        if not len(g):
            continue
        ious = iou_matrix(dets[r.image][r.index].box.as_array(), g)[0]
        ious = np.where(used[r.image], -1.0, ious)
        k = int(np.argmax(ious))
        if ious[k] >= iou_threshold:
            used[r.image][k] = True
            r.tp = True
    return ranked


def evaluate(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthBox]],
             iou_threshold: float = 0.5, num_classes: Optional[int] = None,
             class_names: Optional[list] = None, split_boundary: Optional[str] = None) -> EvalReport:
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    seen = {d.cls for img in dets for d in img} | {g.cls for img in gts for g in img}
    n_cls = num_classes if num_classes is not None else (max(seen) + 1 if seen else 0)
    per_class: Dict[int, ClassStats] = {}
    pooled: list = []
    for c in range(n_cls):
        ranked = match_detections(dets, gts, c, iou_threshold)
        n_gt = sum(1 for img in gts for g in img if g.cls == c)
        ap = all_point_ap([r.tp for r in ranked], n_gt) if n_gt else None
        per_class[c] = ClassStats(n_gt, ap)
        pooled.extend(ranked)
    total_gt = sum(s.num_gt for s in per_class.values())
    with_gt = [s.ap for s in per_class.values() if s.ap is not None]
    mAP = float(np.mean(with_gt)) if with_gt else 0.0

    # F1-optimal confidence threshold over the pooled detections
    best = (0.0, 0.0, 0.0, None)
    if pooled and total_gt:
        confs = np.array([r.conf for r in pooled])
        flags = np.array([r.tp for r in pooled])
        order = np.argsort(-confs, kind="stable")
        confs, flags = confs[order], flags[order]
        tp = np.cumsum(flags)
        n = np.arange(1, len(flags) + 1)
        # a threshold keeps every detection with conf >= t, so only the last index of each
        # group of equal confidences is a valid cut
        last = np.r_[confs[1:] != confs[:-1], True]
        for k in np.flatnonzero(last):
            p, r = tp[k] / n[k], tp[k] / total_gt
            # 2PR/(P+R) written over integers: one rounding, so equal F1 values compare equal
            f1 = 2 * tp[k] / (n[k] + total_gt)
            if f1 > best[0]:
                best = (float(f1), float(p), float(r), float(confs[k]))
    f1, p, r, thr = best
    for c, s in per_class.items():
        if thr is None:
            s.tp, s.fp = 0, 0
        else:
            kept = [x for x in pooled if x.cls == c and x.conf >= thr]
            s.tp = sum(1 for x in kept if x.tp)
            s.fp = len(kept) - s.tp
        s.fn = s.num_gt - s.tp
    return EvalReport(per_class, mAP, p, r, f1, thr, iou_threshold, len(gts), split_boundary, class_names)
