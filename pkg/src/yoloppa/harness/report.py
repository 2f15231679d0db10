"""Delimited-table and figure output for the CLI report paths."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalReport, all_point_ap, match_detections  # noqa: E402


def write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def plot_history(history, path) -> None:
    ep = [e.epoch for e in history.epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("total", "cls", "box"):
        ax1.plot(ep, [getattr(e, key) for e in history.epochs], marker="o", ms=3, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean loss")
    ax1.legend()
    vals = [(e.epoch, e.val.mAP) for e in history.epochs if e.val is not None]
    if vals:
        ax2.plot(*zip(*vals), marker="o", ms=3, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val mAP@0.5")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_pr_curves(dets, gts, num_classes: int, path, class_names=None, iou_threshold: float = 0.5) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in range(num_classes):
        ranked = match_detections(dets, gts, c, iou_threshold)
        n_gt = sum(1 for img in gts for g in img if g.cls == c)
        if not n_gt:
            continue
        tp = 0
        prec, rec = [], []
        for k, r in enumerate(ranked, 1):
            tp += r.tp
            prec.append(tp / k)
            rec.append(tp / n_gt)
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        ap = all_point_ap([r.tp for r in ranked], n_gt)
        ax.plot(rec, prec, label=f"{name} AP={ap:.3f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_bench(rows: Sequence[dict], path) -> None:
    labels = [f"{r['c2f_kind']}\nPPA {'on' if r['ppa'] else 'off'}" for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(labels, [r["params"] / 1e6 for r in rows], color="tab:blue")
    ax1.set_ylabel("parameters (M)")
    ax2.bar(labels, [r["flops"] / 1e9 for r in rows], color="tab:orange")
    ax2.set_ylabel("GFLOPs")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_eval(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_delimited(), "utf-8")
