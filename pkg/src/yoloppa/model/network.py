"""Full detector assembly: backbone, SPPF + PPA neck, three anchor-free heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from ..blocks import C2F, SPPF, ConvBlock
from ..losses import encode_box, softplus
from ..nn import Conv2d, Module
from ..ppa import PPA, PaddedPPA
from ..tensor import Tensor, TensorError, ops
from ..types import BoxXYXY, Detection

STRIDES = (8, 16, 32)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_size: int = 640
    width_scale: float = 0.25
    depth_scale: float = 0.33
    base_channels: tuple = (64, 128, 256, 512, 1024)
    base_repeats: tuple = (3, 6, 6, 3)
    neck_repeats: int = 3
    c2f_kind: str = "faster"
    ppa_enabled: bool = True
    pconv_ratio: float = 0.25
    faster_expansion: int = 2
    ppa_mid_ratio: float = 1.0
    ppa_fusion: str = "sum"
    ap_delta: float = 1.0
    ap_pair_cap: int = 10_000
    ap_pool: str = "image"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.base_channels = tuple(int(c) for c in self.base_channels)
        self.base_repeats = tuple(int(r) for r in self.base_repeats)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % 32 or self.input_size <= 0:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.base_channels) != 5 or len(self.base_repeats) != 4:
            raise ConfigError("base_channels needs 5 entries and base_repeats 4")
        if self.c2f_kind not in ("bottleneck", "faster"):
            raise ConfigError(f"c2f_kind must be 'bottleneck' or 'faster', got {self.c2f_kind!r}")
        if not 0 < self.pconv_ratio <= 1:
            raise ConfigError(f"pconv_ratio must lie in (0, 1], got {self.pconv_ratio}")
        if self.ppa_fusion not in ("sum", "concat"):
            raise ConfigError(f"ppa_fusion must be 'sum' or 'concat', got {self.ppa_fusion!r}")
        if self.ap_pool not in ("image", "batch"):
            raise ConfigError(f"ap_pool must be 'image' or 'batch', got {self.ap_pool!r}")
        for c in self.channels:
            if c < 8 or c % 2:
                raise ConfigError(f"scaled channel count {c} must be even and >= 8")

    @property
    def channels(self) -> list:
        return [max(8, int(math.ceil(c * self.width_scale / 8) * 8)) for c in self.base_channels]

    @property
    def repeats(self) -> list:
        return [max(1, int(round(r * self.depth_scale))) for r in self.base_repeats]

    @property
    def neck_depth(self) -> int:
        return max(1, int(round(self.neck_repeats * self.depth_scale)))

    def levels(self, input_size: Optional[int] = None) -> list:
        s = input_size or self.input_size
        return [(st, s // st, s // st) for st in STRIDES]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["base_repeats"] = list(self.base_repeats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig.from_dict(d)


class Head(Module):
    """Decoupled box / class towers: two 3×3 ConvBlocks each, then a 1×1 projection."""

    def __init__(self, c: int, num_classes: int, rng, bn_eps: float, bn_momentum: float):
        super().__init__()
        bn = dict(bn_eps=bn_eps, bn_momentum=bn_momentum)
        c_box = max(16, c // 4, 4)
        c_cls = max(c, min(num_classes, 100))
        self.c, self.num_classes = c, num_classes
        self.box0 = ConvBlock(c, c_box, 3, 1, rng=rng, **bn)
        self.box1 = ConvBlock(c_box, c_box, 3, 1, rng=rng, **bn)
        self.box_out = Conv2d(c_box, 4, 1, bias=True, rng=rng)
        self.cls0 = ConvBlock(c, c_cls, 3, 1, rng=rng, **bn)
        self.cls1 = ConvBlock(c_cls, c_cls, 3, 1, rng=rng, **bn)
        self.cls_out = Conv2d(c_cls, num_classes, 1, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        box = self.box_out(self.box1(self.box0(x)))
        cls = self.cls_out(self.cls1(self.cls0(x)))
        return ops.concat([box, cls], axis=1)


class Stage(Module):
    def __init__(self, c_in: int, c_out: int, n: int, cfg: ModelConfig, rng):
        super().__init__()
        bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
        self.down = ConvBlock(c_in, c_out, 3, 2, rng=rng, **bn)
        self.c2f = C2F(c_out, c_out, n, cfg.c2f_kind, True, cfg.pconv_ratio, cfg.faster_expansion,
                       rng, **bn)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2f(self.down(x))


class YoloPPA(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        cfg = config
        c0, c1, c2, c3, c4 = cfg.channels
        r = cfg.repeats
        nd = cfg.neck_depth
        bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
        kind = cfg.c2f_kind

        def c2f(ci, co, n, shortcut):
            return C2F(ci, co, n, kind, shortcut, cfg.pconv_ratio, cfg.faster_expansion, rng, **bn)

        self.stem = ConvBlock(3, c0, 3, 2, rng=rng, **bn)
        self.stage1 = Stage(c0, c1, r[0], cfg, rng)
        self.stage2 = Stage(c1, c2, r[1], cfg, rng)
        self.stage3 = Stage(c2, c3, r[2], cfg, rng)
        self.stage4 = Stage(c3, c4, r[3], cfg, rng)
        self.sppf = SPPF(c4, c4, 5, rng, **bn)
        if cfg.ppa_enabled:
            c_mid = max(8, int(round(c4 * cfg.ppa_mid_ratio)))
            self.ppa = PaddedPPA(PPA(c4, c4, c_mid, (2, 4), 4, cfg.ppa_fusion, "silu", rng, **bn))
        else:
            self.ppa = None
        self.top1 = c2f(c4 + c3, c3, nd, False)
        self.top2 = c2f(c3 + c2, c2, nd, False)
        self.down1 = ConvBlock(c2, c2, 3, 2, rng=rng, **bn)
        self.bottom1 = c2f(c2 + c3, c3, nd, False)
        self.down2 = ConvBlock(c3, c3, 3, 2, rng=rng, **bn)
        self.bottom2 = c2f(c3 + c4, c4, nd, False)
        self.head8 = Head(c2, cfg.num_classes, rng, **bn)
        self.head16 = Head(c3, cfg.num_classes, rng, **bn)
        self.head32 = Head(c4, cfg.num_classes, rng, **bn)
        self._validate_graph()
        self.assign_scope_names()

    def _validate_graph(self) -> None:
        c0, c1, c2, c3, c4 = self.config.channels
        checks = [
            ("top1", self.top1.c_in, c4 + c3),
            ("top2", self.top2.c_in, c3 + c2),
            ("bottom1", self.bottom1.c_in, c2 + c3),
            ("bottom2", self.bottom2.c_in, c3 + c4),
        ]
        for name, got, want in checks:
            if got != want:
                raise ConfigError(f"layer {name}: concat gives {want} channels, block expects {got}")

    @property
    def levels(self) -> list:
        return self.config.levels()

    def forward(self, images: Tensor, check_size: bool = True) -> List[Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise TensorError(f"model input must be N×3×S×S, got {images.shape}")
        s = images.shape[2]
        if images.shape[3] != s:
            raise TensorError(f"model input must be square, got {images.shape}")
        if check_size and s != self.config.input_size:
            raise TensorError(f"model expects {self.config.input_size}px input, got {s}px")
        if s % 32:
            raise TensorError(f"input size {s} is not a multiple of 32")
        x = self.stem(images)
        x = self.stage1(x)
        p3 = self.stage2(x)
        p4 = self.stage3(p3)
        p5 = self.sppf(self.stage4(p4))
        if self.ppa is not None:
            p5 = self.ppa(p5)
        t4 = self.top1(ops.concat([ops.upsample_nearest(p5, 2), p4], axis=1))
        o3 = self.top2(ops.concat([ops.upsample_nearest(t4, 2), p3], axis=1))
        o4 = self.bottom1(ops.concat([self.down1(o3), t4], axis=1))
        o5 = self.bottom2(ops.concat([self.down2(o4), p5], axis=1))
        return [self.head8(o3), self.head16(o4), self.head32(o5)]

    def ppa_module(self) -> Optional[PPA]:
        return self.ppa.ppa if self.ppa is not None else None


def build(config: ModelConfig) -> YoloPPA:
    return YoloPPA(config)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def decode_predictions(raw: Sequence, conf_threshold: float = 0.25,
                       strides: Sequence[int] = STRIDES) -> List[List[Detection]]:
    """Per image, every cell whose best class sigmoid >= ``conf_threshold``."""
    arrays = [r.data if isinstance(r, Tensor) else np.asarray(r) for r in raw]
    n = arrays[0].shape[0]
    out: list = [[] for _ in range(n)]
    for arr, stride in zip(arrays, strides):
        arr = arr.astype(np.float64)
        _, k, gh, gw = arr.shape
        probs = _sigmoid(arr[:, 4:])
        conf = probs.max(axis=1)
        cls = probs.argmax(axis=1)
        d = softplus(arr[:, :4]) * stride                          # N,4,gh,gw
        cx = (np.arange(gw) + 0.5) * stride
        cy = (np.arange(gh) + 0.5) * stride
        for b, row, col in zip(*np.nonzero(conf >= conf_threshold)):
            x, y = cx[col], cy[row]
            dl, dt_, dr, db = d[b, :, row, col]
            box = (x - dl, y - dt_, x + dr, y + db)
            if not (box[0] < box[2] and box[1] < box[3]):
                continue
            out[b].append(Detection(int(cls[b, row, col]), float(conf[b, row, col]),
                                    BoxXYXY(*map(float, box))))
    return out


def encode_targets(boxes: Sequence[BoxXYXY], cells: Sequence[tuple], stride: int, num_classes: int,
                   classes: Sequence[int], grid: tuple) -> np.ndarray:
    """Raw prediction map (1, 4+C, gh, gw) that decodes to ``boxes`` at ``cells``.

    Unmatched cells get class logits of -20 so they fall below any threshold.
    """

    gh, gw = grid
    raw = np.zeros((1, 4 + num_classes, gh, gw))
    raw[:, 4:] = -20.0
    for box, (row, col), c in zip(boxes, cells, classes):
        raw[0, :4, row, col] = encode_box(box, row, col, stride)
        raw[0, 4 + c, row, col] = 20.0
    return raw
