"""Letterbox resizing and class-wise non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ..tensor import Tensor
from ..types import BoxXYXY, Detection, GroundTruthBox, iou_matrix

PAD_VALUE = 0.5


@dataclass(frozen=True)
class LetterboxTransform:
    """``letterboxed = original * scale + pad``, per axis."""

    scale: float
    pad_x: int
    pad_y: int
    orig_hw: tuple
    target: int

    def forward_xy(self, x, y):
        return x * self.scale + self.pad_x, y * self.scale + self.pad_y

    def inverse_xy(self, x, y):
        return (x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale

    def forward_box(self, b: BoxXYXY) -> BoxXYXY:
        x1, y1 = self.forward_xy(b.x1, b.y1)
        x2, y2 = self.forward_xy(b.x2, b.y2)
        return BoxXYXY(x1, y1, x2, y2)

    def inverse_box(self, b: BoxXYXY) -> BoxXYXY:
        x1, y1 = self.inverse_xy(b.x1, b.y1)
        x2, y2 = self.inverse_xy(b.x2, b.y2)
        return BoxXYXY(x1, y1, x2, y2)


def letterbox_transform(h: int, w: int, target: int) -> LetterboxTransform:
    if target % 32:
        raise ValueError(f"letterbox target {target} is not a multiple of 32")
    s = target / max(h, w)
    pad_x = int(math.floor((target - w * s) / 2))
    pad_y = int(math.floor((target - h * s) / 2))
    return LetterboxTransform(s, pad_x, pad_y, (h, w), target)


def _bilinear_axis(n_out: int, n_in: int, scale: float, pad: int):
    """Source indices/weights for each output pixel center, plus an inside mask."""
    dst = np.arange(n_out) + 0.5
    src = (dst - pad) / scale - 0.5
    inside = (dst >= pad) & (dst < pad + n_in * scale)
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0, inside


def letterbox(img, target: int):
    """Aspect-preserving bilinear resize into a gray ``target`` square.

    Returns ``(image, transform)``; ``transform`` maps letterboxed pixel
    coordinates back to the original with :meth:`LetterboxTransform.inverse_xy`.
    """
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    c, h, w = arr.shape
    t = letterbox_transform(h, w, target)
    if (h, w) == (target, target):
        out = arr.copy()
    else:
        y0, y1, fy, iny = _bilinear_axis(target, h, t.scale, t.pad_y)
        x0, x1, fx, inx = _bilinear_axis(target, w, t.scale, t.pad_x)
        top = arr[:, y0][:, :, x0] * (1 - fx) + arr[:, y0][:, :, x1] * fx
        bot = arr[:, y1][:, :, x0] * (1 - fx) + arr[:, y1][:, :, x1] * fx
        out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
        mask = iny[:, None] & inx[None, :]
        out = np.where(mask[None], out, PAD_VALUE)
    out = out.astype(arr.dtype, copy=False)
    return (Tensor(out, dtype=out.dtype) if isinstance(img, Tensor) else out), t


def letterbox_gts(gts: Sequence[GroundTruthBox], t: LetterboxTransform) -> List[GroundTruthBox]:
    return [GroundTruthBox(g.cls, t.forward_box(g.box)) for g in gts]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45, max_det: int = None) -> List[Detection]:
    """Greedy per-class suppression of IoU > ``iou_threshold``.

    Candidates are visited by descending confidence, ties by lower input
    index; the survivors come back in that same order.
    """
    dets = list(dets)
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    boxes = np.array([dets[i].box.as_array() for i in order])
    classes = np.array([dets[i].cls for i in order])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        if max_det is not None and len(keep) >= max_det:
            break
        later = np.arange(k + 1, len(order))
        hit = later[(classes[later] == classes[k]) & (ious[k, later] > iou_threshold)]
        alive[hit] = False
    return [dets[i] for i in keep]
