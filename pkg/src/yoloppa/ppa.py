"""Parallelized Patch Aware Attention.

Pointwise compression feeds two patch-aware branches (grid granularity 2 and
4) and a serial convolution branch.  The branches are fused, gated by channel
then spatial attention, and projected to the output width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from .blocks import ConvBlock, _check_channels
from .nn import BatchNorm2d, Conv2d, Linear, Module, activate
from .tensor import Tensor, TensorError, ops


@dataclass
class AttentionMaps:
    """Diagnostics captured during the last forward pass (first batch item)."""

    patch_weights: dict = field(default_factory=dict)  # P -> array (C, P*P)
    channel_gate: Optional[np.ndarray] = None  # (C,)
    spatial_gate: Optional[np.ndarray] = None  # (H, W)

    def write(self, fh: TextIO) -> None:
        """Plain-text dump: a ``#`` header per map, then one channel per line."""
        for p, a in sorted(self.patch_weights.items()):
            fh.write(f"# patch_weights P={p} channels={a.shape[0]} patches={a.shape[1]}\n")
            for row in a:
                fh.write(" ".join(f"{v:.8g}" for v in row) + "\n")
        if self.channel_gate is not None:
            fh.write(f"# channel_gate channels={self.channel_gate.size}\n")
            for v in self.channel_gate:
                fh.write(f"{v:.8g}\n")
        if self.spatial_gate is not None:
            h, w = self.spatial_gate.shape
            fh.write(f"# spatial_gate channels=1 height={h} width={w}\n")
            fh.write(" ".join(f"{v:.8g}" for v in self.spatial_gate.reshape(-1)) + "\n")


def patch_index(h: int, w: int, P: int, H: int, W: int) -> int:
    """Row-major index of the patch holding pixel (h, w) on a P×P grid."""
    return (h // (H // P)) * P + (w // (W // P))


class PatchAware(Module):
    """Reweight each patch of a P×P grid by a per-channel softmax over patches.

    Tokens are patch means, mixed across channels by a shared linear map; the
    softmax runs over the P² patches independently per channel, and the output
    scales each pixel by ``P² · weight`` so uniform weights leave it unchanged.
    """

    def __init__(self, c: int, P: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if P < 1:
            raise TensorError(f"PatchAware: P must be >= 1, got {P}")
        self.c, self.P = c, P
        # no bias: a per-channel constant shifts every patch logit equally and
        # cancels in the softmax over patches, so it would be a dead parameter
        self.linear = Linear(c, c, bias=False, rng=rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "PatchAware")
        n, c, h, w = x.shape
        P = self.P
        if h % P or w % P:
            raise TensorError(
                f"PatchAware(P={P}): spatial extents {h}x{w} are not divisible by {P}; "
                "pad the input to a multiple of the patch grid"
            )
        tokens = ops.adaptive_avg_pool(x, P, P)                        # N,C,P,P
        tokens = ops.transpose(ops.reshape(tokens, (n, c, P * P)), (0, 2, 1))  # N,P²,C
        mixed = self.linear(tokens)
        weights = ops.softmax(mixed, axis=1)                            # over patches
        self.last_weights = weights.data[0].T.copy()                    # C,P²
        grid = ops.reshape(ops.transpose(weights, (0, 2, 1)), (n, c, P, P))
        gate = ops.upsample_nearest(ops.scale(grid, P * P), (h // P, w // P))
        return ops.mul(x, gate)


class SerialConvBranch(Module):
    def __init__(self, c: int, rng: Optional[np.random.Generator] = None, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1):
        super().__init__()
        self.c = c
        self.cv1 = ConvBlock(c, c, 3, 1, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.cv2 = ConvBlock(c, c, 3, 1, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "SerialConvBranch")
        return self.cv2(self.cv1(x))


class ChannelAttention(Module):
    """Squeeze-excitation gate: global mean -> MLP (reduction ``ratio``) -> sigmoid."""

    def __init__(self, c: int, ratio: int = 4, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if c % ratio:
            raise TensorError(f"ChannelAttention: {c} channels not divisible by reduction {ratio}")
        self.c, self.ratio = c, ratio
        self.fc1 = Linear(c, c // ratio, rng=rng)
        self.fc2 = Linear(c // ratio, c, rng=rng)
        self.last_gate: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "ChannelAttention")
        n, c, h, w = x.shape
        pooled = ops.reshape(ops.adaptive_avg_pool(x, 1, 1), (n, c))
        gate = ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))
        self.last_gate = gate.data[0].copy()
        return ops.mul(x, ops.expand(ops.reshape(gate, (n, c, 1, 1)), x.shape))


class SpatialAttention(Module):
    """Mean/max channel summary -> 7×7 conv -> sigmoid per-pixel gate."""

    def __init__(self, k: int = 7, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(2, 1, k, 1, k // 2, bias=True, rng=rng)
        self.last_gate: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        summary = ops.concat(
            [ops.mean(x, axis=1, keepdims=True), ops.max(x, axis=1, keepdims=True)], axis=1
        )
        gate = ops.sigmoid(self.conv(summary))
        self.last_gate = gate.data[0, 0].copy()
        return ops.mul(x, ops.expand(gate, x.shape))


class PPA(Module):
    def __init__(self, c_in: int, c_out: int, c_mid: Optional[int] = None, patch_sizes=(2, 4),
                 reduction: int = 4, fusion: str = "sum", act: str = "silu",
                 rng: Optional[np.random.Generator] = None, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c_mid = c_in if c_mid is None else c_mid
        if c_out < 1:
            raise TensorError(f"PPA: c_out must be >= 1, got {c_out}")
        if fusion not in ("sum", "concat"):
            raise TensorError(f"PPA: fusion must be 'sum' or 'concat', got {fusion!r}")
        self.c_in, self.c_mid, self.c_out = c_in, c_mid, c_out
        self.patch_sizes = tuple(patch_sizes)
        self.grid = int(np.lcm.reduce(self.patch_sizes))
        self.fusion, self.act = fusion, act
        self.pw = Conv2d(c_in, c_mid, 1, rng=rng)
        self.branches = []
        for p in self.patch_sizes:
            br = PatchAware(c_mid, p, rng)
            self.add_module(f"patch{p}", br)
            self.branches.append(br)
        self.serial = SerialConvBranch(c_mid, rng, bn_eps, bn_momentum)
        if fusion == "concat":
            self.fuse = Conv2d((len(self.patch_sizes) + 1) * c_mid, c_mid, 1, rng=rng)
        self.channel_att = ChannelAttention(c_mid, reduction, rng)
        self.spatial_att = SpatialAttention(7, rng)
        self.project = Conv2d(c_mid, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out, bn_eps, bn_momentum)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "PPA")
        h, w = x.shape[2:]
        if h % self.grid or w % self.grid:
            raise TensorError(f"PPA: spatial extents {h}x{w} must be divisible by {self.grid}")
        y = self.pw(x)
        outs = [br(y) for br in self.branches] + [self.serial(y)]
        if self.fusion == "sum":
            f = outs[0]
            for o in outs[1:]:
                f = ops.add(f, o)
        else:
            f = self.fuse(ops.concat(outs, axis=1))
        z = self.spatial_att(self.channel_att(f))
        return activate(self.bn(self.project(z)), self.act)

    def attention_maps(self) -> AttentionMaps:
        return AttentionMaps(
            patch_weights={br.P: br.last_weights for br in self.branches if br.last_weights is not None},
            channel_gate=self.channel_att.last_gate,
            spatial_gate=self.spatial_att.last_gate,
        )


class PaddedPPA(Module):
    """PPA with zero-padding up to the patch grid and a crop back afterward."""

    def __init__(self, ppa: PPA):
        super().__init__()
        self.ppa = ppa

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        g = self.ppa.grid
        ph, pw = (-h) % g, (-w) % g
        if ph or pw:
            x = ops.pad2d(x, 0, ph, 0, pw)
        return ops.crop2d(self.ppa(x), h, w)
