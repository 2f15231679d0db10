"""Convolutional building blocks: Conv-BN-act, partial convolution, FasterBlock,
bottleneck, C2F/PC2F and SPPF."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module, Parameter, activate, kaiming_uniform
from .tensor import Tensor, TensorError, ops


def _check_channels(x: Tensor, expected: int, layer: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise TensorError(f"{layer}: expected {expected} input channels, got shape {x.shape}")


class ConvBlock(Module):
    """Conv -> BatchNorm -> activation, padded by ``k // 2``."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1, act: str = "silu",
                 rng: Optional[np.random.Generator] = None, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise TensorError(f"ConvBlock: channel counts must be >= 1, got {c_in}->{c_out}")
        self.c_in, self.c_out, self.k, self.s, self.act = c_in, c_out, k, s, act
        self.conv = Conv2d(c_in, c_out, k, s, k // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out, bn_eps, bn_momentum)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "ConvBlock")
        return activate(self.bn(self.conv(x)), self.act)


def partial_channels(c: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise TensorError(f"partial ratio must lie in (0, 1], got {ratio}")
    return min(c, max(1, int(round(ratio * c))))


class PConv(Module):
    """3×3 convolution over the first ``c_p`` channels; the rest pass through untouched."""

    def __init__(self, c: int, ratio: float = 0.25, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.c = c
        self.ratio = ratio
        self.c_p = partial_channels(c, ratio)
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (self.c_p, self.c_p, 3, 3), self.c_p * 9))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "PConv")
        head = ops.conv2d(ops.slice_channels(x, 0, self.c_p), self.weight, None, 1, 1)
        if self.c_p == self.c:
            return head
        return ops.concat([head, ops.slice_channels(x, self.c_p, self.c)], axis=1)

    def _own_params(self) -> int:
        return 9 * self.c_p * self.c_p


class FasterBlock(Module):
    """PConv -> 1×1 expand -> BN -> ReLU -> 1×1 reduce, plus the input."""

    def __init__(self, c: int, expansion: int = 2, ratio: float = 0.25,
                 rng: Optional[np.random.Generator] = None, use_residual: bool = True,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c = c
        self.hidden = expansion * c
        self.use_residual = use_residual
        self.pconv = PConv(c, ratio, rng)
        self.pw1 = Conv2d(c, self.hidden, 1, rng=rng)
        self.bn = BatchNorm2d(self.hidden, bn_eps, bn_momentum)
        self.pw2 = Conv2d(self.hidden, c, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "FasterBlock")
        y = self.pw2(ops.relu(self.bn(self.pw1(self.pconv(x)))))
        return ops.add(x, y) if self.use_residual else y


class Bottleneck(Module):
    """Two 3×3 ConvBlocks with an optional residual add."""

    def __init__(self, c: int, shortcut: bool = True, rng: Optional[np.random.Generator] = None,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        self.c = c
        self.use_residual = shortcut
        self.cv1 = ConvBlock(c, c, 3, 1, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.cv2 = ConvBlock(c, c, 3, 1, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "Bottleneck")
        y = self.cv2(self.cv1(x))
        return ops.add(x, y) if self.use_residual else y


class C2F(Module):
    """Split-chain-concat fusion block.

    The entry 1×1 conv output is split into two halves; ``n`` inner blocks run
    in sequence on the second half and every intermediate is kept, so the exit
    1×1 conv sees ``(2 + n)`` halves.  ``block_kind="faster"`` gives PC2F.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, block_kind: str = "bottleneck",
                 shortcut: bool = True, pconv_ratio: float = 0.25, expansion: int = 2,
                 rng: Optional[np.random.Generator] = None, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1):
        super().__init__()
        if c_out % 2:
            raise TensorError(f"C2F: c_out must be even, got {c_out}")
        if n < 1:
            raise TensorError(f"C2F: need at least one inner block, got n={n}")
        if block_kind not in ("bottleneck", "faster"):
            raise TensorError(f"C2F: block_kind must be 'bottleneck' or 'faster', got {block_kind!r}")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.n, self.block_kind = c_in, c_out, n, block_kind
        self.half = c_out // 2
        bn = dict(bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.cv1 = ConvBlock(c_in, c_out, 1, 1, rng=rng, **bn)
        self.blocks = []
        for i in range(n):
            if block_kind == "faster":
                blk = FasterBlock(self.half, expansion, pconv_ratio, rng, **bn)
            else:
                blk = Bottleneck(self.half, shortcut, rng, **bn)
            self.add_module(f"m{i}", blk)
            self.blocks.append(blk)
        self.cv2 = ConvBlock((2 + n) * self.half, c_out, 1, 1, rng=rng, **bn)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "C2F")
        y = self.cv1(x)
        parts = [ops.slice_channels(y, 0, self.half), ops.slice_channels(y, self.half, self.c_out)]
        for blk in self.blocks:
            parts.append(blk(parts[-1]))
        return self.cv2(ops.concat(parts, axis=1))


class SPPF(Module):
    """1×1 entry, three chained 5×5 max-pools, concat of all four, 1×1 exit."""

    def __init__(self, c_in: int, c_out: int, k: int = 5, rng: Optional[np.random.Generator] = None,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        if c_in % 2:
            raise TensorError(f"SPPF: c_in must be even, got {c_in}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.hidden = c_in // 2
        bn = dict(bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.cv1 = ConvBlock(c_in, self.hidden, 1, 1, rng=rng, **bn)
        self.cv2 = ConvBlock(4 * self.hidden, c_out, 1, 1, rng=rng, **bn)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "SPPF")
        y = self.cv1(x)
        p1 = ops.pool2d(y, "max", self.k, 1, self.k // 2)
        p2 = ops.pool2d(p1, "max", self.k, 1, self.k // 2)
        p3 = ops.pool2d(p2, "max", self.k, 1, self.k // 2)
        return self.cv2(ops.concat([y, p1, p2, p3], axis=1))
