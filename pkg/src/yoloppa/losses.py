"""Classification and box losses, target assignment and the composite detection loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, TensorError, ops
from .types import BoxError, BoxXYXY, GroundTruthBox

# Incremented whenever cross_entropy clamps a zero probability.
CLAMP_EVENTS = {"count": 0}


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def _check_one_hot(t: np.ndarray) -> int:
    t = np.asarray(t)
    if t.ndim != 1 or not np.isin(t, (0, 1)).all() or t.sum() != 1:
        raise ValueError(f"target is not one-hot: {t.tolist()}")
    return int(np.argmax(t))


def cross_entropy(p, t) -> float:
    """``-sum_i t_i log p_i`` for a probability vector and a one-hot target."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    k = _check_one_hot(t)
    if abs(p.sum() - 1.0) > 1e-5 or (p < 0).any() or (p > 1).any():
        raise ValueError(f"not a probability vector: {p.tolist()}")
    pt = p[k]
    if pt <= 0:
        CLAMP_EVENTS["count"] += 1
        pt = 1e-12
    return float(-math.log(pt))


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean one-hot cross-entropy over rows of a (M, C) logit tensor, via log-softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if targets.shape != (m,) or (targets < 0).any() or (targets >= c).any():
        raise TensorError(f"cross_entropy_logits: targets {targets.shape} invalid for logits {logits.shape}")
    onehot = np.zeros((m, c), dtype=logits.dtype)
    onehot[np.arange(m), targets] = 1
    logp = ops.log_softmax(logits, axis=1)
    return ops.scale(ops.sum(ops.mul(logp, Tensor(onehot, dtype=logits.dtype))), -1.0 / m)


# ---------------------------------------------------------------------------
# ranking loss
# ---------------------------------------------------------------------------

def step(x, mode: str = "hard", delta: float = 1.0):
    """Heaviside step with H(0) = 0.5, or its piecewise-linear smoothing of half-width ``delta``."""
    xa = np.asarray(x, dtype=np.float64)
    if mode == "hard":
        out = np.where(xa > 0, 1.0, np.where(xa < 0, 0.0, 0.5))
    elif mode == "smoothed":
        if delta <= 0:
            raise ValueError(f"smoothed step needs delta > 0, got {delta}")
        out = np.clip((xa + delta) / (2 * delta), 0.0, 1.0)
    else:
        raise ValueError(f"step mode must be 'hard' or 'smoothed', got {mode!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class RankingBatch:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = positive

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.isfinite(self.scores).all():
            raise ValueError("non-finite ranking score")


def ap_loss(
    scores,
    labels,
    mode: str = "smoothed",
    delta: float = 1.0,
    pair_cap: Optional[int] = 10_000,
    seed: int = 0,
    info: Optional[dict] = None,
) -> Tensor:
    """Ranking loss whose hard-step value is ``1 - AP`` on tie-free scores.

    For every positive ``i`` the numerator counts negatives ``j`` ranked above
    it, ``H(s_j - s_i)``, and the denominator ``1 + sum_{k != i} H(s_k - s_i)``
    is the rank of ``i`` among all samples.  The rank is held constant per
    positive; in smoothed mode only the numerator uses the smoothed step, so
    gradients push each positive above the negatives near it.

    With no positives the loss is 0 and ``info["no_positives"]`` is set.
    When ``|P| * |N|`` exceeds ``pair_cap`` a seeded subset of negatives is used.
    """
    if isinstance(scores, RankingBatch):
        scores, labels = scores.scores, scores.labels
    if not isinstance(scores, Tensor):
        scores = Tensor(np.asarray(scores, dtype=np.float64).reshape(-1), dtype=np.float64)
    if scores.ndim != 1:
        scores = ops.reshape(scores, (-1,))
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if labels.shape[0] != scores.shape[0]:
        raise TensorError(f"ap_loss: {scores.shape[0]} scores but {labels.shape[0]} labels")
    if mode not in ("hard", "smoothed"):
        raise ValueError(f"ap_loss mode must be 'hard' or 'smoothed', got {mode!r}")
    pos = np.flatnonzero(labels)
    neg = np.flatnonzero(~labels)
    stats = {"no_positives": pos.size == 0, "num_pos": int(pos.size), "num_neg": int(neg.size),
             "subsampled": False}
    if pos.size == 0:
        if info is not None:
            info.update(stats)
        return ops.scale(ops.sum(scores), 0.0)
    if pair_cap is not None and pos.size * neg.size > pair_cap:
        keep = max(1, pair_cap // pos.size)
        rng = np.random.default_rng(seed)
        neg = np.sort(rng.choice(neg, size=keep, replace=False))
        stats["subsampled"] = True
        stats["num_neg"] = int(neg.size)
    if info is not None:
        info.update(stats)

    s = scores.data.astype(np.float64)
    sp, sn = s[pos], s[neg]
    # rank of each positive among P ∪ N (hard step, constant per positive)
    everyone = np.concatenate([sp, sn])
    diff_all = everyone[None, :] - sp[:, None]
    h_all = step(diff_all, "hard")
    h_all = np.atleast_2d(h_all)
    h_all[np.arange(pos.size), np.arange(pos.size)] = 0.0
    rank = 1.0 + h_all.sum(axis=1)

    if mode == "hard" or neg.size == 0:
        if neg.size:
            num = np.atleast_2d(step(sn[None, :] - sp[:, None], "hard")).sum(axis=1)
        else:
            num = np.zeros(pos.size)
        value = float(np.mean(num / rank))
        return ops.add(ops.scale(ops.sum(scores), 0.0), value)

    dt = scores.dtype
    tp = ops.take(scores, pos)
    tn = ops.take(scores, neg)
    shape = (pos.size, neg.size)
    x = ops.sub(ops.expand(ops.reshape(tn, (1, neg.size)), shape),
                ops.expand(ops.reshape(tp, (pos.size, 1)), shape))
    h = ops.clip(ops.scale(ops.add(x, float(delta)), 1.0 / (2 * delta)), 0.0, 1.0)
    num = ops.sum(h, axis=1)
    weights = Tensor(1.0 / (rank * pos.size), dtype=dt)
    return ops.sum(ops.mul(num, weights))


def average_precision_oracle(scores, labels=None) -> float:
    """AP by sorting: mean over positives of precision at each positive's rank."""
    if isinstance(scores, RankingBatch):
        scores, labels = scores.scores, scores.labels
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels, dtype=bool).reshape(-1)
    if np.unique(s).size != s.size:
        raise ValueError("average_precision_oracle needs distinct scores")
    if not lab.any():
        raise ValueError("average_precision_oracle needs at least one positive")
    order = sorted(range(s.size), key=lambda i: -s[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if lab[i]:
            hits += 1
            total += hits / rank
    return total / hits


# ---------------------------------------------------------------------------
# CIoU
# ---------------------------------------------------------------------------

def _cols(t: Tensor):
    return [ops.slice_axis(t, 1, i, i + 1) for i in range(4)]


def ciou_tensor(pred: Tensor, target: Tensor, eps: float = 1e-9) -> Tensor:
    """Row-wise CIoU of (M, 4) xyxy tensors, returned as (M, 1)."""
    px1, py1, px2, py2 = _cols(pred)
    tx1, ty1, tx2, ty2 = _cols(target)
    pw, ph = ops.sub(px2, px1), ops.sub(py2, py1)
    tw, th = ops.sub(tx2, tx1), ops.sub(ty2, ty1)
    iw = ops.clip(ops.sub(ops.minimum(px2, tx2), ops.maximum(px1, tx1)), 0.0, None)
    ih = ops.clip(ops.sub(ops.minimum(py2, ty2), ops.maximum(py1, ty1)), 0.0, None)
    inter = ops.mul(iw, ih)
    union = ops.sub(ops.add(ops.mul(pw, ph), ops.mul(tw, th)), inter)
    iou = ops.div(inter, union)
    cw = ops.sub(ops.maximum(px2, tx2), ops.minimum(px1, tx1))
    ch = ops.sub(ops.maximum(py2, ty2), ops.minimum(py1, ty1))
    c2 = ops.add(ops.add(ops.square(cw), ops.square(ch)), eps)
    dx = ops.scale(ops.sub(ops.add(px1, px2), ops.add(tx1, tx2)), 0.5)
    dy = ops.scale(ops.sub(ops.add(py1, py2), ops.add(ty1, ty2)), 0.5)
    rho2 = ops.add(ops.square(dx), ops.square(dy))
    v = ops.scale(ops.square(ops.sub(ops.atan(ops.div(tw, th)), ops.atan(ops.div(pw, ph)))),
                  4.0 / math.pi ** 2)
    alpha = ops.div(v, ops.add(ops.add(ops.neg(iou), 1.0 + eps), v))
    return ops.sub(ops.sub(iou, ops.div(rho2, c2)), ops.mul(alpha, v))


def _box_of(b) -> BoxXYXY:
    if isinstance(b, BoxXYXY):
        return b
    try:
        return BoxXYXY.from_array(b)
    except BoxError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise BoxError(f"cannot interpret {b!r} as a box") from exc


def ciou(a, b) -> float:
    a, b = _box_of(a), _box_of(b)
    ta = Tensor(a.as_array().reshape(1, 4), dtype=np.float64)
    tb = Tensor(b.as_array().reshape(1, 4), dtype=np.float64)
    return ciou_tensor(ta, tb).item()


def ciou_loss(a, b) -> float:
    return 1.0 - ciou(a, b)


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------

SIGNS = np.array([-1.0, -1.0, 1.0, 1.0])


def cell_center(row: int, col: int, stride: int) -> tuple:
    return ((col + 0.5) * stride, (row + 0.5) * stride)


def softplus_inverse(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if (d <= 0).any():
        raise ValueError("side distances must be positive to encode")
    return np.where(d > 20, d + np.log1p(-np.exp(-d)), np.log(np.expm1(np.minimum(d, 20))))


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def encode_box(box: BoxXYXY, row: int, col: int, stride: int) -> np.ndarray:
    """Raw regression values whose softplus gives (left, top, right, bottom) / stride."""
    cx, cy = cell_center(row, col, stride)
    d = np.array([cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy]) / stride
    return softplus_inverse(d)


def side_distances(box: BoxXYXY, row: int, col: int, stride: int) -> np.ndarray:
    cx, cy = cell_center(row, col, stride)
    return np.array([cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy]) / stride


def decode_raw(raw: np.ndarray, row: int, col: int, stride: int) -> np.ndarray:
    cx, cy = cell_center(row, col, stride)
    d = softplus(raw) * stride
    return np.array([cx - d[0], cy - d[1], cx + d[2], cy + d[3]])


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

@dataclass
class Match:
    level: int
    row: int
    col: int
    gt: int
    cls: int
    target: np.ndarray  # side distances (l, t, r, b) in stride units


@dataclass
class AssignmentResult:
    levels: list  # (stride, gh, gw)
    grids: list  # per level int array (gh, gw), -1 = unmatched
    matches: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # gt indices lost to a cell conflict
    boxes: list = field(default_factory=list)  # GroundTruthBox per gt index

    @property
    def num_positives(self) -> int:
        return len(self.matches)

    def positives_per_level(self) -> list:
        return [int((g >= 0).sum()) for g in self.grids]


def level_for_size(size: float, img_size: int) -> int:
    s = img_size / 640.0
    if size < 32 * s:
        return 0
    if size < 96 * s:
        return 1
    return 2


def assign_targets(gts: Sequence[GroundTruthBox], levels: Sequence[tuple], img_size: int) -> AssignmentResult:
    """Route each box to one level by size, then to the cell holding its center.

    When two boxes land on the same cell the larger area wins; equal areas go
    to the lower index.  Losers are listed in ``dropped``.
    """
    levels = [tuple(int(v) for v in lv) for lv in levels]
    if len(levels) != 3:
        raise ValueError(f"expected three (stride, gh, gw) levels, got {levels}")
    grids = [np.full((gh, gw), -1, dtype=np.int64) for _, gh, gw in levels]
    gts = list(gts)
    order = sorted(range(len(gts)), key=lambda i: (-gts[i].box.area, i))
    dropped = []
    for i in order:
        b = gts[i].box
        li = level_for_size(max(b.width, b.height), img_size)
        stride, gh, gw = levels[li]
        cx, cy = b.center
        row = min(max(int(math.floor(cy / stride)), 0), gh - 1)
        col = min(max(int(math.floor(cx / stride)), 0), gw - 1)
        if grids[li][row, col] >= 0:
            dropped.append(i)
            continue
        grids[li][row, col] = i
    matches = []
    for li, (stride, gh, gw) in enumerate(levels):
        for row, col in zip(*np.nonzero(grids[li] >= 0)):
            gi = int(grids[li][row, col])
            matches.append(Match(li, int(row), int(col), gi, int(gts[gi].cls),
                                 side_distances(gts[gi].box, int(row), int(col), stride)))
    return AssignmentResult(levels, grids, matches, sorted(dropped), gts)


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    cls: Tensor
    box: Tensor
    total: Tensor
    positives_per_level: list
    ap_images_without_positives: int = 0

    def values(self) -> dict:
        return {"cls": self.cls.item(), "box": self.box.item(), "total": self.total.item()}


def flatten_predictions(preds: Sequence[Tensor]) -> Tensor:
    """(N, 4+C, gh, gw) per level -> (N, A, 4+C), cells in level then row-major order."""
    parts = []
    for p in preds:
        n, k, gh, gw = p.shape
        parts.append(ops.transpose(ops.reshape(p, (n, k, gh * gw)), (0, 2, 1)))
    return ops.concat(parts, axis=1)


def detection_loss(
    preds: Sequence[Tensor],
    assignments: Sequence[AssignmentResult],
    num_classes: int,
    cls_kind: str = "ap",
    lambda_cls: float = 0.5,
    lambda_box: float = 7.5,
    ap_delta: float = 1.0,
    ap_pair_cap: Optional[int] = 10_000,
    ap_pool: str = "image",
    seed: int = 0,
) -> LossBreakdown:
    """Box term: mean CIoU loss over matched cells. Class term: CE at matched
    cells, or the smoothed ranking loss over every (cell, class) logit."""
    if cls_kind not in ("ce", "ap"):
        raise ValueError(f"cls_kind must be 'ce' or 'ap', got {cls_kind!r}")
    n = preds[0].shape[0]
    if len(assignments) != n:
        raise TensorError(f"detection_loss: {len(assignments)} assignments for batch of {n}")
    levels = assignments[0].levels
    if len(preds) != len(levels):
        raise TensorError(f"detection_loss: {len(preds)} prediction levels vs {len(levels)} grids")
    for p, (stride, gh, gw) in zip(preds, levels):
        if p.ndim != 4 or p.shape[0] != n or p.shape[1] != 4 + num_classes or p.shape[2:] != (gh, gw):
            raise TensorError(
                f"detection_loss: prediction {p.shape} does not match ({n}, {4 + num_classes}, {gh}, {gw})"
            )
    dt = preds[0].dtype
    offsets = np.cumsum([0] + [gh * gw for _, gh, gw in levels])
    a_total = int(offsets[-1])
    flat = flatten_predictions(preds)                          # N, A, 4+C
    rows2d = ops.reshape(flat, (n * a_total, 4 + num_classes))

    rows, classes, strides, centers, targets = [], [], [], [], []
    for b, asg in enumerate(assignments):
        for m in asg.matches:
            stride = levels[m.level][0]
            rows.append(b * a_total + int(offsets[m.level]) + m.row * levels[m.level][2] + m.col)
            classes.append(m.cls)
            strides.append(stride)
            centers.append(cell_center(m.row, m.col, stride))
            targets.append(asg.boxes[m.gt].box.as_array())
    per_level = [sum(a.positives_per_level()[i] for a in assignments) for i in range(len(levels))]

    zero = ops.scale(ops.sum(flat), 0.0)
    if rows:
        picked = ops.take(rows2d, rows, axis=0)                # M, 4+C
        d = ops.softplus(ops.slice_axis(picked, 1, 0, 4))
        s = np.asarray(strides, dtype=np.float64)[:, None] * SIGNS[None, :]
        c = np.asarray(centers, dtype=np.float64)
        c4 = np.concatenate([c, c], axis=1)
        box = ops.add(ops.mul(d, Tensor(s, dtype=dt)), Tensor(c4, dtype=dt))
        tgt = Tensor(np.asarray(targets), dtype=dt)
        one_minus = ops.neg(ops.sub(ciou_tensor(box, tgt), 1.0))
        box_loss = ops.scale(ops.sum(one_minus), 1.0 / len(rows))
    else:
        box_loss = zero

    no_pos_images = 0
    if cls_kind == "ce":
        if rows:
            logits = ops.slice_axis(picked, 1, 4, 4 + num_classes)
            cls_loss = cross_entropy_logits(logits, classes)
        else:
            cls_loss = zero
    else:
        cls_all = ops.slice_axis(flat, 2, 4, 4 + num_classes)  # N, A, C
        labels = np.zeros((n, a_total, num_classes), dtype=bool)
        for b, asg in enumerate(assignments):
            for m in asg.matches:
                labels[b, int(offsets[m.level]) + m.row * levels[m.level][2] + m.col, m.cls] = True
        if ap_pool == "batch":
            cls_loss = ap_loss(ops.reshape(cls_all, (-1,)), labels.reshape(-1), "smoothed",
                               ap_delta, ap_pair_cap, seed)
            no_pos_images = int(sum(1 for a in assignments if not a.matches))
        elif ap_pool == "image":
            per_image = ops.reshape(cls_all, (n, a_total * num_classes))
            terms = []
            for b in range(n):
                if not labels[b].any():
                    no_pos_images += 1
                    continue
                scores = ops.reshape(ops.take(per_image, [b], axis=0), (-1,))
                terms.append(ap_loss(scores, labels[b].reshape(-1), "smoothed", ap_delta,
                                     ap_pair_cap, seed + b))
            if terms:
                cls_loss = terms[0]
                for t in terms[1:]:
                    cls_loss = ops.add(cls_loss, t)
                cls_loss = ops.scale(cls_loss, 1.0 / len(terms))
            else:
                cls_loss = zero
        else:
            raise ValueError(f"ap_pool must be 'image' or 'batch', got {ap_pool!r}")

    total = ops.add(ops.scale(cls_loss, lambda_cls), ops.scale(box_loss, lambda_box))
    return LossBreakdown(cls_loss, box_loss, total, per_level, no_pos_images)
