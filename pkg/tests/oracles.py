"""Brute-force reference implementations and random micro-instances.

Everything here is written with plain Python loops and exact fractions so it
shares no code path with the library beyond the data types.
"""

from fractions import Fraction

import numpy as np

from yoloppa.types import BoxXYXY, Detection, GroundTruthBox


def iou_exact(a: BoxXYXY, b: BoxXYXY) -> Fraction:
    fa = [Fraction(v) for v in (a.x1, a.y1, a.x2, a.y2)]
    fb = [Fraction(v) for v in (b.x1, b.y1, b.x2, b.y2)]
    iw = max(Fraction(0), min(fa[2], fb[2]) - max(fa[0], fb[0]))
    ih = max(Fraction(0), min(fa[3], fb[3]) - max(fa[1], fb[1]))
    inter = iw * ih
    union = (fa[2] - fa[0]) * (fa[3] - fa[1]) + (fb[2] - fb[0]) * (fb[3] - fb[1]) - inter
    return inter / union


def brute_nms(dets, thr):
    """Visit in (−conf, index) order; keep a box unless a kept same-class box overlaps it."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in order:
        if all(dets[j].cls != dets[i].cls or iou_exact(dets[i].box, dets[j].box) <= Fraction(repr(thr))
               for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def brute_match(dets, gts, cls, thr):
    """TP flags in global ranking order for one class."""
    ranked = sorted(((d.confidence, i, j) for i, img in enumerate(dets) for j, d in enumerate(img)
                     if d.cls == cls), key=lambda t: (-t[0], t[1], t[2]))
    used = set()
    flags = []
    for conf, i, j in ranked:
        best, best_k = Fraction(-1), None
        for k, g in enumerate(gts[i]):
            if g.cls != cls or (i, k) in used:
                continue
            v = iou_exact(dets[i][j].box, g.box)
            if v > best:
                best, best_k = v, k
        hit = best_k is not None and best >= Fraction(repr(thr))
        if hit:
            used.add((i, best_k))
        flags.append((conf, hit))
    return flags


def brute_ap(flags, num_gt):
    """Exhaustive PR curve: at each new recall level, the best precision at any
    cut reaching at least that recall, weighted by the recall step."""
    points = []
    tp = 0
    for k, (_, hit) in enumerate(flags, 1):
        tp += hit
        points.append((Fraction(tp, num_gt), Fraction(tp, k)))
    ap, prev = Fraction(0), Fraction(0)
    for r, _ in points:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in points if rr >= r)
            prev = r
    return ap


def brute_evaluate(dets, gts, num_classes, thr=0.5):
    """Per-class AP, mAP, and the pooled F1-optimal operating point."""
    per = {}
    pooled = []
    for c in range(num_classes):
        flags = brute_match(dets, gts, c, thr)
        n_gt = sum(g.cls == c for img in gts for g in img)
        per[c] = (n_gt, brute_ap(flags, n_gt) if n_gt else None)
        pooled += [(conf, hit, c) for conf, hit in flags]
    aps = [ap for _, ap in per.values() if ap is not None]
    total_gt = sum(n for n, _ in per.values())
    best = (Fraction(0), None, Fraction(0), Fraction(0))
    for t in sorted({conf for conf, _, _ in pooled}, reverse=True):
        kept = [x for x in pooled if x[0] >= t]
        tp = sum(1 for x in kept if x[1])
        f1 = Fraction(2 * tp, len(kept) + total_gt) if total_gt else Fraction(0)
        if f1 > best[0]:
            best = (f1, t, Fraction(tp, len(kept)), Fraction(tp, total_gt))
    counts = {}
    for c in range(num_classes):
        kept = [x for x in pooled if x[2] == c and best[1] is not None and x[0] >= best[1]]
        tp = sum(1 for x in kept if x[1])
        counts[c] = (tp, len(kept) - tp, per[c][0] - tp)
    mAP = sum(aps) / len(aps) if aps else Fraction(0)
    return {"per_class": per, "mAP": mAP, "f1": best[0], "threshold": best[1],
            "precision": best[2], "recall": best[3], "counts": counts}


def _rand_box(rng, lim=20):
    x1, y1 = (int(v) for v in rng.integers(0, lim - 2, size=2))
    w, h = (int(v) for v in rng.integers(2, 10, size=2))
    return BoxXYXY(float(x1), float(y1), float(min(x1 + w, lim)), float(min(y1 + h, lim)))


def _conf(rng):
    # a coarse grid on purpose: it produces confidence ties
    return float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9])) if rng.random() < 0.4 else float(rng.random())


def micro_instance(seed, max_images=4, max_boxes=6, num_classes=3):
    """Random images with ≤ ``max_boxes`` GTs and detections each."""
    rng = np.random.default_rng(seed)
    n_img = int(rng.integers(1, max_images + 1))
    gts, dets = [], []
    for _ in range(n_img):
        g = [GroundTruthBox(int(rng.integers(num_classes)), _rand_box(rng))
             for _ in range(int(rng.integers(0, max_boxes + 1)))]
        d = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if g and rng.random() < 0.6:
                src = g[int(rng.integers(len(g)))]
                jit = rng.integers(-2, 3, size=4).astype(float)
                b = src.box.as_array() + jit
                b[2], b[3] = max(b[2], b[0] + 1), max(b[3], b[1] + 1)
                cls = src.cls if rng.random() < 0.8 else int(rng.integers(num_classes))
                d.append(Detection(cls, _conf(rng), BoxXYXY(*map(float, b))))
            else:
                d.append(Detection(int(rng.integers(num_classes)), _conf(rng), _rand_box(rng)))
        gts.append(g)
        dets.append(d)
    return dets, gts


def nms_instance(seed, max_dets=12, num_classes=2):
    rng = np.random.default_rng(seed)
    return [Detection(int(rng.integers(num_classes)), _conf(rng), _rand_box(rng, 30))
            for _ in range(int(rng.integers(0, max_dets + 1)))]


def evaluator_matches_oracle(report, ref, num_classes, tol=1e-12):
    """Return a list of mismatch descriptions (empty when equal)."""
    bad = []
    for c in range(num_classes):
        n_gt, ap = ref["per_class"][c]
        got = report.per_class[c]
        if got.num_gt != n_gt:
            bad.append(f"class {c} num_gt {got.num_gt} vs {n_gt}")
        if (ap is None) != (got.ap is None) or (ap is not None and abs(got.ap - float(ap)) > tol):
            bad.append(f"class {c} AP {got.ap} vs {ap}")
        if (got.tp, got.fp, got.fn) != ref["counts"][c]:
            bad.append(f"class {c} counts {(got.tp, got.fp, got.fn)} vs {ref['counts'][c]}")
    if abs(report.mAP - float(ref["mAP"])) > tol:
        bad.append(f"mAP {report.mAP} vs {float(ref['mAP'])}")
    if report.threshold != ref["threshold"]:
        bad.append(f"threshold {report.threshold} vs {ref['threshold']}")
    for key in ("f1", "precision", "recall"):
        if abs(getattr(report, key) - float(ref[key])) > tol:
            bad.append(f"{key} {getattr(report, key)} vs {float(ref[key])}")
    return bad
