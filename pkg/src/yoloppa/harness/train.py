"""Adam + per-step cosine annealing training loop and batched inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..losses import assign_targets, detection_loss
from ..model.network import YoloPPA, decode_predictions
from ..tensor import NonFiniteError, Tensor, no_grad
from ..types import BoxXYXY, Detection, GroundTruthBox
from .dataset import Sample
from .evaluate import EvalReport, evaluate
from .postprocess import LetterboxTransform, letterbox, letterbox_gts, nms

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Training hit a NaN/Inf; carries the batch id and the loss components."""

    def __init__(self, epoch: int, batch: int, components: dict, cause: str = ""):
        self.epoch, self.batch, self.components = epoch, batch, components
        msg = f"non-finite loss at epoch {epoch} batch {batch}: {components}"
        if cause:
            msg += f" ({cause})"
        super().__init__(msg)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_min_ratio: float = 0.01
    cls_kind: str = "ap"
    seed: int = 0
    val_every: int = 1
    val_conf_threshold: float = 0.001
    nms_iou: float = 0.45
    max_det: int = 100
    max_steps: Optional[int] = None  # stop early after this many optimizer steps

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise TrainConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.cls_kind not in ("ce", "ap"):
            raise TrainConfigError(f"cls_kind must be 'ce' or 'ap', got {self.cls_kind!r}")
        if not 0 <= self.lr_min_ratio <= 1:
            raise TrainConfigError("lr_min_ratio must lie in [0, 1]")

    @property
    def lr_min(self) -> float:
        return self.lr * self.lr_min_ratio

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(t: int, total: int, lr: float, lr_min: float) -> float:
    """``lr_min + (lr - lr_min) * (1 + cos(pi t / T)) / 2``."""
    if total <= 0:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * min(t, total) / total))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class PreparedSet:
    """Letterboxed images and ground truth at the network resolution."""

    images: np.ndarray  # N×3×S×S
    gts: List[List[GroundTruthBox]]  # network-pixel boxes
    orig_gts: List[List[GroundTruthBox]]
    transforms: List[LetterboxTransform]
    sources: List[str]

    def __len__(self) -> int:
        return len(self.sources)


def prepare(samples: Sequence[Sample], size: int, dtype=np.float32) -> PreparedSet:
    imgs, gts, tfs = [], [], []
    for s in samples:
        img, t = letterbox(s.image.data, size)
        imgs.append(img.astype(dtype))
        gts.append(letterbox_gts(s.gts, t))
        tfs.append(t)
    arr = np.stack(imgs) if imgs else np.zeros((0, 3, size, size), dtype=dtype)
    return PreparedSet(arr, gts, [list(s.gts) for s in samples], tfs, [s.source for s in samples])


@dataclass
class EpochRecord:
    epoch: int
    cls: float
    box: float
    total: float
    lr_start: float
    lr_end: float
    steps: int
    seconds: float
    val: Optional[EvalReport] = None

    def row(self) -> dict:
        d = {k: getattr(self, k) for k in ("epoch", "cls", "box", "total", "lr_start", "lr_end", "steps", "seconds")}
        d["val_mAP"] = None if self.val is None else self.val.mAP
        return d


@dataclass
class History:
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)

    @property
    def final_val(self) -> Optional[EvalReport]:
        for e in reversed(self.epochs):
            if e.val is not None:
                return e.val
        return None


def _finite_or_raise(bd, epoch: int, batch: int) -> dict:
    comps = {"cls": float(bd.cls.item()), "box": float(bd.box.item()), "total": float(bd.total.item())}
    if not all(math.isfinite(v) for v in comps.values()):
        raise NonFiniteLossError(epoch, batch, comps)
    return comps


def train(model: YoloPPA, train_samples, cfg: TrainConfig, val_samples=None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          class_names: Optional[list] = None) -> History:
    """Fit ``model`` in place and return the per-epoch history."""
    mcfg = model.config
    size = mcfg.input_size
    data = train_samples if isinstance(train_samples, PreparedSet) else prepare(train_samples, size,
                                                                                 model.stem.conv.weight.dtype)
    if len(data) == 0:
        raise TrainConfigError("training set is empty")
    if data.images.shape[2:] != (size, size):
        raise TrainConfigError(f"samples are {data.images.shape[2:]}, model expects {size}px")
    val = None
    if val_samples is not None:
        val = val_samples if isinstance(val_samples, PreparedSet) else prepare(val_samples, size,
                                                                               model.stem.conv.weight.dtype)
    levels = mcfg.levels()
    assignments = [assign_targets(g, levels, size) for g in data.gts]
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    hist = History()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if step >= total_steps:
            break
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = {"cls": 0.0, "box": 0.0, "total": 0.0}
        done = 0
        lr_start = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            model.zero_grad()
            try:
                preds = model(Tensor(data.images[idx]))
                bd = detection_loss(preds, [assignments[i] for i in idx], mcfg.num_classes, cfg.cls_kind,
                                    ap_delta=mcfg.ap_delta, ap_pair_cap=mcfg.ap_pair_cap,
                                    ap_pool=mcfg.ap_pool, seed=cfg.seed * 100003 + step)
                comps = _finite_or_raise(bd, epoch, b)
                bd.total.backward()
            except NonFiniteError as exc:
                raise NonFiniteLossError(epoch, b, {}, str(exc)) from exc
            opt.step()
            hist.step_losses.append(comps["total"])
            hist.lrs.append(opt.lr)
            for k in sums:
                sums[k] += comps[k]
            done += 1
            step += 1
        rec = EpochRecord(epoch, sums["cls"] / done, sums["box"] / done, sums["total"] / done,
                          lr_start, opt.lr, done, 0.0)
        if val is not None and (epoch % cfg.val_every == 0 or epoch == cfg.epochs or step >= total_steps):
            rec.val = evaluate_model(model, val, cfg.val_conf_threshold, cfg.nms_iou, cfg.max_det,
                                     class_names=class_names)
        rec.seconds = time.perf_counter() - t0
        hist.epochs.append(rec)
        log.info("epoch %d: total %.4f cls %.4f box %.4f lr %.2e%s", epoch, rec.total, rec.cls, rec.box,
                 opt.lr, "" if rec.val is None else f" val mAP {rec.val.mAP:.4f}")
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return hist


def predict(model: YoloPPA, data: PreparedSet, conf_threshold: float = 0.001, nms_iou: float = 0.45,
            max_det: int = 100, batch_size: int = 16) -> List[List[Detection]]:
    """Detections per image in original-image pixels."""
    was = model.training
    model.eval()
    out: list = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            raw = model(Tensor(data.images[start:start + batch_size]))
            dets = decode_predictions(raw, conf_threshold)
            for k, per in enumerate(dets):
                t = data.transforms[start + k]
                kept = nms(per, nms_iou, max_det)
                out.append([_to_original(d, t) for d in kept])
    model.train(was)
    return [[d for d in img if d is not None] for img in out]


def _to_original(d: Detection, t: LetterboxTransform) -> Optional[Detection]:
    h, w = t.orig_hw
    b = t.inverse_box(d.box)
    x1, y1 = min(max(b.x1, 0.0), w), min(max(b.y1, 0.0), h)
    x2, y2 = min(max(b.x2, 0.0), w), min(max(b.y2, 0.0), h)
    if not (x1 < x2 and y1 < y2):
        return None
    return Detection(d.cls, d.confidence, BoxXYXY(x1, y1, x2, y2))


def evaluate_model(model: YoloPPA, data, conf_threshold: float = 0.001, nms_iou: float = 0.45,
                   max_det: int = 100, iou_threshold: float = 0.5, class_names=None,
                   split_boundary=None) -> EvalReport:
    if not isinstance(data, PreparedSet):
        data = prepare(data, model.config.input_size, model.stem.conv.weight.dtype)
    dets = predict(model, data, conf_threshold, nms_iou, max_det)
    return evaluate(dets, data.orig_gts, iou_threshold, model.config.num_classes, class_names, split_boundary)
