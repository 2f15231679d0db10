"""Parameter and FLOP accounting.

Parameter counts come from each layer's hyperparameters.  FLOPs are traced
from one inference pass at the requested resolution: convolution and linear
layers cost 2 FLOPs per multiply-accumulate, batch norm 2 ops per element,
activations 1 op per element and pooling one op per window tap.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor import Tensor, no_grad, profile
from .network import ModelConfig, YoloPPA, build


def count_params(model) -> int:
    return int(model.num_params())


def count_buffers(model) -> int:
    return int(sum(b.size for _, b in model.named_buffers()))


@dataclass
class LayerCost:
    name: str
    conv_flops: int = 0
    linear_flops: int = 0
    bn_ops: int = 0
    act_ops: int = 0
    pool_ops: int = 0

    @property
    def total(self) -> int:
        return self.conv_flops + self.linear_flops + self.bn_ops + self.act_ops + self.pool_ops


COLUMNS = ("conv_flops", "linear_flops", "bn_ops", "act_ops", "pool_ops")


@dataclass
class FlopsReport:
    input_hw: tuple
    layers: list
    params: int
    buffers: int
    counterpart: Optional[dict] = None  # the same build with the other C2F kind

    @property
    def totals(self) -> dict:
        t = {c: sum(getattr(l, c) for l in self.layers) for c in COLUMNS}
        t["total"] = sum(t.values())
        return t

    @property
    def total_flops(self) -> int:
        return self.totals["total"]

    def delta(self) -> Optional[dict]:
        """Parameter / FLOP difference against the counterpart C2F kind."""
        if self.counterpart is None:
            return None
        return {
            "params": self.params - self.counterpart["params"],
            "flops": self.total_flops - self.counterpart["flops"],
            "counterpart_kind": self.counterpart["c2f_kind"],
        }

    def to_delimited(self, sep: str = ",") -> str:
        lines = [sep.join(("layer",) + COLUMNS + ("total",))]
        for l in self.layers:
            lines.append(sep.join([l.name] + [str(getattr(l, c)) for c in COLUMNS] + [str(l.total)]))
        t = self.totals
        lines.append(sep.join(["TOTAL"] + [str(t[c]) for c in COLUMNS] + [str(t["total"])]))
        return "\n".join(lines) + "\n"


_KIND_TO_COLUMN = {"conv": "conv_flops", "linear": "linear_flops", "bn": "bn_ops",
                   "act": "act_ops", "pool": "pool_ops"}


def trace_costs(module, x: Tensor, **call_kw) -> list:
    """Run ``module(x)`` without grad and return per-scope LayerCost entries."""
    was_training = module.training
    module.eval()
    with no_grad(), profile.OpRecorder() as rec:
        module(x, **call_kw)
    module.train(was_training)
    layers: "OrderedDict[str, LayerCost]" = OrderedDict()
    for e in rec.entries:
        lc = layers.setdefault(e.scope, LayerCost(e.scope))
        col = _KIND_TO_COLUMN[e.kind]
        amount = 2 * e.macs if e.kind in ("conv", "linear") else e.elementwise
        setattr(lc, col, getattr(lc, col) + amount)
    return list(layers.values())


def count_flops(model: YoloPPA, input_hw=None, with_counterpart: bool = True) -> FlopsReport:
    cfg = model.config
    if input_hw is None:
        input_hw = (cfg.input_size, cfg.input_size)
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    h, w = input_hw
    x = Tensor(np.zeros((1, 3, h, w), dtype=model.stem.conv.weight.dtype))
    layers = trace_costs(model, x, check_size=False)
    report = FlopsReport((h, w), layers, count_params(model), count_buffers(model))
    if with_counterpart:
        other = "bottleneck" if cfg.c2f_kind == "faster" else "faster"
        twin = build(cfg.replace(c2f_kind=other))
        twin_report = count_flops(twin, input_hw, with_counterpart=False)
        report.counterpart = {"c2f_kind": other, "params": twin_report.params,
                              "flops": twin_report.total_flops}
    return report


def ablation_grid(base: ModelConfig, input_size: Optional[int] = None) -> list:
    """Params/FLOPs for {bottleneck, faster} × {PPA off, on}."""
    rows = []
    s = input_size or base.input_size
    for kind in ("bottleneck", "faster"):
        for ppa in (False, True):
            cfg = base.replace(c2f_kind=kind, ppa_enabled=ppa, input_size=s)
            m = build(cfg)
            rep = count_flops(m, (s, s), with_counterpart=False)
            rows.append({"c2f_kind": kind, "ppa": ppa, "params": rep.params,
                         "buffers": rep.buffers, "flops": rep.total_flops,
                         "conv_flops": rep.totals["conv_flops"]})
    return rows
