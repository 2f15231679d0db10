"""Registry of finite-difference gradient checks for every differentiable piece.

Each case builds a scalar objective in double precision from a seed.  Module
outputs are reduced against a fixed random projection so no adjoint cancels by
symmetry.  Cases are grouped by package area for ``yoloppa gradcheck``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from ..blocks import C2F, SPPF, Bottleneck, ConvBlock, FasterBlock, PConv
from ..losses import AssignmentResult, ap_loss, assign_targets, ciou_tensor, cross_entropy_logits, detection_loss
from ..model.network import ModelConfig, build
from ..nn import Module
from ..ppa import PPA, ChannelAttention, PaddedPPA, PatchAware, SerialConvBranch, SpatialAttention
from ..tensor import Tensor, gradient_check, ops
from ..tensor.gradcheck import double_precision
from ..types import BoxXYXY, GroundTruthBox

SMOOTH_TOL = 1e-6  # elementwise, reductions, shape ops, losses
CONV_TOL = 1e-4  # anything with conv or pool accumulation
MODEL_TOL = 1e-3
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Case:
    group: str
    name: str
    tol: float
    make: Callable[[int], tuple]  # seed -> (f, inputs)
    max_coords: Optional[int] = None


@dataclass
class CaseResult:
    group: str
    name: str
    seed: int
    tol: float
    max_rel_err: float
    checked: int
    excluded: int
    passed: bool
    seconds: float


def _t(rng, *shape, scale=1.0, shift=0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=True, dtype=np.float64)


def _proj(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(10_000 + seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(w, dtype=out.dtype)))


def _unary(op, positive=False):
    def make(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 3, 4)
        if positive:
            x.data[:] = np.abs(x.data) + 0.5
        return (lambda x: _proj(op(x), seed)), [x]
    return make


def _binary(op, positive_b=False):
    def make(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        if positive_b:
            b.data[:] = np.abs(b.data) + 0.5
        return (lambda a, b: _proj(op(a, b), seed)), [a, b]
    return make


def _module(factory: Callable[[np.random.Generator], Module], shape, train: bool = True):
    def make(seed):
        rng = np.random.default_rng(seed)
        m = factory(rng)
        m.train(train)
        x = _t(rng, *shape)
        params = m.parameters()
        for p in params:
            p.requires_grad = True

        def f(x, *ps):
            return _proj(m(x), seed)
        return f, [x] + params
    return make


def _tensor_cases() -> List[Case]:
    g = "tensor"
    cases = [
        Case(g, "add", SMOOTH_TOL, _binary(ops.add)),
        Case(g, "sub", SMOOTH_TOL, _binary(ops.sub)),
        Case(g, "mul", SMOOTH_TOL, _binary(ops.mul)),
        Case(g, "div", SMOOTH_TOL, _binary(ops.div, positive_b=True)),
        Case(g, "maximum", SMOOTH_TOL, _binary(ops.maximum)),
        Case(g, "minimum", SMOOTH_TOL, _binary(ops.minimum)),
        Case(g, "scale", SMOOTH_TOL, _unary(lambda x: ops.scale(x, -2.5))),
        Case(g, "neg", SMOOTH_TOL, _unary(ops.neg)),
        Case(g, "relu", SMOOTH_TOL, _unary(ops.relu)),
        Case(g, "sigmoid", SMOOTH_TOL, _unary(ops.sigmoid)),
        Case(g, "silu", SMOOTH_TOL, _unary(ops.silu)),
        Case(g, "exp", SMOOTH_TOL, _unary(ops.exp)),
        Case(g, "log", SMOOTH_TOL, _unary(ops.log, positive=True)),
        Case(g, "softplus", SMOOTH_TOL, _unary(ops.softplus)),
        Case(g, "atan", SMOOTH_TOL, _unary(ops.atan)),
        Case(g, "square", SMOOTH_TOL, _unary(ops.square)),
        Case(g, "clip", SMOOTH_TOL, _unary(lambda x: ops.clip(x, -0.5, 0.7))),
        Case(g, "sum_axis", SMOOTH_TOL, _unary(lambda x: ops.sum(x, axis=1, keepdims=True))),
        Case(g, "mean_axis", SMOOTH_TOL, _unary(lambda x: ops.mean(x, axis=0))),
        Case(g, "max_axis", SMOOTH_TOL, _unary(lambda x: ops.max(x, axis=1))),
        Case(g, "reshape", SMOOTH_TOL, _unary(lambda x: ops.reshape(x, (2, 6)))),
        Case(g, "transpose", SMOOTH_TOL, _unary(lambda x: ops.transpose(x, (1, 0)))),
        Case(g, "expand", SMOOTH_TOL, _unary(lambda x: ops.expand(ops.reshape(ops.sum(x, axis=1), (3, 1)), (3, 5)))),
        Case(g, "concat", SMOOTH_TOL, _binary(lambda a, b: ops.concat([a, b], axis=1))),
        Case(g, "slice_axis", SMOOTH_TOL, _unary(lambda x: ops.slice_axis(x, 1, 1, 3))),
        Case(g, "take", SMOOTH_TOL, _unary(lambda x: ops.take(x, [2, 0, 2], axis=0))),
        Case(g, "softmax", SMOOTH_TOL, _unary(lambda x: ops.softmax(x, axis=1))),
        Case(g, "log_softmax", SMOOTH_TOL, _unary(lambda x: ops.log_softmax(x, axis=1))),
    ]

    def linear(seed):
        rng = np.random.default_rng(seed)
        x, w, b = _t(rng, 3, 5), _t(rng, 5, 4), _t(rng, 4)
        return (lambda x, w, b: _proj(ops.linear(x, w, b), seed)), [x, w, b]

    def conv(stride, pad, k):
        def make(seed):
            rng = np.random.default_rng(seed)
            x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, k, k, scale=0.3), _t(rng, 4)
            return (lambda x, w, b: _proj(ops.conv2d(x, w, b, stride, pad), seed)), [x, w, b]
        return make

    def spatial(op):
        def make(seed):
            rng = np.random.default_rng(seed)
            x = _t(rng, 2, 3, 4, 4)
            return (lambda x: _proj(op(x), seed)), [x]
        return make

    def bn(training):
        def make(seed):
            rng = np.random.default_rng(seed)
            x, gamma, beta = _t(rng, 3, 2, 3, 3), _t(rng, 2, shift=1.0), _t(rng, 2)
            rm, rv = np.zeros(2), np.ones(2) * 1.5

            def f(x, gamma, beta):
                return _proj(ops.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training), seed)
            return f, [x, gamma, beta]
        return make

    cases += [
        Case(g, "linear", SMOOTH_TOL, linear),
        Case(g, "conv2d_3x3", CONV_TOL, conv(1, 1, 3)),
        Case(g, "conv2d_3x3_s2", CONV_TOL, conv(2, 1, 3)),
        Case(g, "conv2d_1x1", CONV_TOL, conv(1, 0, 1)),
        Case(g, "max_pool", CONV_TOL, spatial(lambda x: ops.pool2d(x, "max", 3, 1, 1))),
        Case(g, "avg_pool", CONV_TOL, spatial(lambda x: ops.pool2d(x, "avg", 2, 2, 0))),
        Case(g, "adaptive_avg_pool", CONV_TOL, spatial(lambda x: ops.adaptive_avg_pool(x, 2, 2))),
        Case(g, "pad2d", SMOOTH_TOL, spatial(lambda x: ops.pad2d(x, 1, 2, 0, 1))),
        Case(g, "crop2d", SMOOTH_TOL, spatial(lambda x: ops.crop2d(x, 3, 2))),
        Case(g, "upsample_nearest", SMOOTH_TOL, spatial(lambda x: ops.upsample_nearest(x, 2))),
        Case(g, "batchnorm_train", SMOOTH_TOL, bn(True)),
        Case(g, "batchnorm_eval", SMOOTH_TOL, bn(False)),
    ]
    return cases


def _block_cases() -> List[Case]:
    g = "blocks"
    return [
        Case(g, "conv_block", CONV_TOL, _module(lambda r: ConvBlock(4, 6, 3, 1, rng=r), (2, 4, 5, 5))),
        Case(g, "conv_block_s2", CONV_TOL, _module(lambda r: ConvBlock(4, 6, 3, 2, rng=r), (2, 4, 6, 6))),
        Case(g, "pconv", CONV_TOL, _module(lambda r: PConv(8, 0.25, rng=r), (2, 8, 5, 5))),
        Case(g, "faster_block", CONV_TOL, _module(lambda r: FasterBlock(8, rng=r), (2, 8, 4, 4))),
        Case(g, "bottleneck", CONV_TOL, _module(lambda r: Bottleneck(8, True, rng=r), (2, 8, 4, 4))),
        Case(g, "c2f", CONV_TOL, _module(lambda r: C2F(8, 8, 1, "bottleneck", True, rng=r), (2, 8, 4, 4)),
             max_coords=60),
        Case(g, "pc2f", CONV_TOL, _module(lambda r: C2F(8, 8, 2, "faster", True, rng=r), (2, 8, 4, 4)),
             max_coords=60),
        Case(g, "sppf", CONV_TOL, _module(lambda r: SPPF(8, 8, 5, rng=r), (2, 8, 5, 5)), max_coords=60),
    ]


def _ppa_cases() -> List[Case]:
    g = "ppa"
    return [
        Case(g, "patch_aware_p2", CONV_TOL, _module(lambda r: PatchAware(4, 2, r), (2, 4, 4, 4))),
        Case(g, "patch_aware_p4", CONV_TOL, _module(lambda r: PatchAware(4, 4, r), (2, 4, 8, 8)), max_coords=80),
        Case(g, "serial_branch", CONV_TOL, _module(lambda r: SerialConvBranch(4, r), (2, 4, 4, 4)), max_coords=80),
        Case(g, "channel_attention", CONV_TOL, _module(lambda r: ChannelAttention(8, 4, r), (2, 8, 3, 3))),
        Case(g, "spatial_attention", CONV_TOL, _module(lambda r: SpatialAttention(7, r), (2, 3, 5, 5)),
             max_coords=80),
        Case(g, "ppa", CONV_TOL, _module(lambda r: PPA(8, 8, 8, rng=r), (1, 8, 8, 8)), max_coords=60),
        Case(g, "ppa_concat", CONV_TOL, _module(lambda r: PPA(8, 8, 8, fusion="concat", rng=r), (2, 8, 4, 4)),
             max_coords=60),
        Case(g, "padded_ppa", CONV_TOL, _module(lambda r: PaddedPPA(PPA(8, 8, 8, rng=r)), (2, 8, 6, 5)),
             max_coords=60),
    ]


def _toy_assignments(rng, n: int, img: int) -> List[AssignmentResult]:
    levels = [(s, img // s, img // s) for s in (8, 16, 32)]
    out = []
    for _ in range(n):
        gts = []
        for _ in range(int(rng.integers(1, 4))):
            size = float(rng.uniform(4, img * 0.6))
            x, y = rng.uniform(0, img - size, size=2)
            gts.append(GroundTruthBox(int(rng.integers(0, 3)), BoxXYXY(x, y, x + size, y + size * rng.uniform(0.6, 1))))
        out.append(assign_targets(gts, levels, img))
    return out


def _loss_cases() -> List[Case]:
    g = "losses"

    def ce(seed):
        rng = np.random.default_rng(seed)
        logits = _t(rng, 6, 4)
        tg = rng.integers(0, 4, size=6)
        return (lambda z: cross_entropy_logits(z, tg)), [logits]

    def ap(seed):
        rng = np.random.default_rng(seed)
        n = 10
        s = _t(rng, n, scale=0.8)
        labels = rng.random(n) < 0.4
        labels[0] = True
        return (lambda s: ap_loss(s, labels, "smoothed", 1.0)), [s]

    def ciou(seed):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 10, size=(5, 2))
        wh = rng.uniform(2, 6, size=(5, 2))
        pred = Tensor(np.concatenate([xy, xy + wh], 1), requires_grad=True, dtype=np.float64)
        xy2 = xy + rng.uniform(-2, 2, size=(5, 2))
        tgt = Tensor(np.concatenate([xy2, xy2 + rng.uniform(2, 6, size=(5, 2))], 1), dtype=np.float64)
        return (lambda p: ops.sum(ciou_tensor(p, tgt))), [pred]

    def det(kind):
        def make(seed):
            rng = np.random.default_rng(seed)
            img, nc = 64, 3
            asg = _toy_assignments(rng, 2, img)
            preds = [_t(rng, 2, 4 + nc, img // s, img // s, scale=0.5) for s in (8, 16, 32)]
            return (lambda *p: detection_loss(list(p), asg, nc, kind).total), preds
        return make

    return [
        Case(g, "cross_entropy", SMOOTH_TOL, ce),
        Case(g, "ap_loss_smoothed", SMOOTH_TOL, ap),
        Case(g, "ciou", SMOOTH_TOL, ciou),
        Case(g, "detection_loss_ap", CONV_TOL, det("ap"), max_coords=150),
        Case(g, "detection_loss_ce", CONV_TOL, det("ce"), max_coords=150),
    ]


def tiny_model_config(seed: int = 0, **kw) -> ModelConfig:
    """Every stage 8 channels wide, one block per stage, 64 px input."""
    base = dict(num_classes=2, input_size=64, width_scale=0.01, depth_scale=0.33, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def _model_cases() -> List[Case]:
    def make(seed):
        rng = np.random.default_rng(seed)
        m = build(tiny_model_config(seed))
        m.train()
        x = Tensor(rng.random((2, 3, 64, 64)), requires_grad=True, dtype=np.float64)
        params = m.parameters()

        def f(x, *ps):
            outs = m(x)
            total = _proj(outs[0], seed)
            for k, o in enumerate(outs[1:], 1):
                total = ops.add(total, _proj(o, seed + 97 * k))
            return total
        return f, [x] + params

    return [Case("model", "tiny_model", MODEL_TOL, make, max_coords=4)]


def all_cases() -> Dict[str, List[Case]]:
    return {
        "tensor": _tensor_cases(),
        "blocks": _block_cases(),
        "ppa": _ppa_cases(),
        "losses": _loss_cases(),
        "model": _model_cases(),
    }


def run_case(case: Case, seed: int) -> CaseResult:
    with double_precision():
        f, inputs = case.make(seed)
        t0 = time.perf_counter()
        rep = gradient_check(f, inputs, tol=case.tol, max_coords=case.max_coords, seed=seed)
    return CaseResult(case.group, case.name, seed, case.tol, rep.max_rel_err, rep.checked, rep.excluded,
                      rep.passed and rep.checked > 0, time.perf_counter() - t0)


def run_group(group: str, seeds=DEFAULT_SEEDS) -> List[CaseResult]:
    cases = all_cases()
    if group not in cases:
        raise KeyError(f"unknown gradcheck group {group!r}; choose from {sorted(cases)}")
    return [run_case(c, s) for c in cases[group] for s in seeds]
