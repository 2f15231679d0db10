"""``yoloppa`` command line.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness.config import ConfigFileError, load_config

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("yoloppa")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> tuple:
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return s == "on"


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _load_split(args):
    from .harness.dataset import load_dataset, load_gtsdb, read_class_names, split_dataset

    if getattr(args, "gtsdb", None):
        from .harness.dataset import coarse_mapping

        mode = args.gtsdb_mode
        train, val, boundary = split_dataset(args.gtsdb, lambda d: load_gtsdb(d, mode=mode))
        if mode == "coarse":
            names = coarse_mapping()[1]
        else:
            names = [str(i) for i in range(43)]
        return train, val, boundary, names
    root = Path(args.data)
    names = read_class_names(root) or read_class_names(root / "train")
    train, val, boundary = split_dataset(root, load_dataset)
    return train, val, boundary, names


def cmd_gen_data(args) -> int:
    from .harness.dataset import write_dataset
    from .harness.synthetic import GenerationStats, SyntheticConfig, generate_synthetic

    if args.freq is not None:
        freq = args.freq
    elif args.classes == len(SyntheticConfig.frequencies):
        freq = SyntheticConfig.frequencies  # the imbalanced default mix
    else:
        freq = tuple([1.0 / args.classes] * args.classes)
    base = dict(image_size=args.size, num_classes=args.classes, frequencies=freq, seed=args.seed)
    out = Path(args.out)
    stats = GenerationStats()
    cfg = SyntheticConfig(num_images=args.images, name_prefix="train", **base)
    samples = generate_synthetic(cfg, stats)
    if args.val_images:
        write_dataset(samples, out / "train", cfg.class_names)
        vcfg = SyntheticConfig(num_images=args.val_images, name_prefix="val", **{**base, "seed": args.seed + 1000})
        write_dataset(generate_synthetic(vcfg, stats), out / "val", cfg.class_names)
    else:
        write_dataset(samples, out, cfg.class_names)
    print(f"wrote {args.images} train + {args.val_images} val images to {out}; "
          f"objects placed {stats.placed}, skipped {stats.skipped}; per class {stats.per_class}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# model / training
# ---------------------------------------------------------------------------

def _configs(args):
    from .harness.train import TrainConfig
    from .model import ModelConfig

    model_kw, train_kw = load_config(args.config)
    for key, attr in (("cls_kind", "cls_loss"), ("epochs", "epochs"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("lr", "lr")):
        v = getattr(args, attr, None)
        if v is not None:
            train_kw[key] = v
    for key, attr in (("c2f_kind", "c2f"), ("ppa_enabled", "ppa"), ("seed", "seed"),
                      ("input_size", "input"), ("num_classes", "num_classes")):
        v = getattr(args, attr, None)
        if v is not None:
            model_kw[key] = v
    return ModelConfig, model_kw, TrainConfig(**train_kw)


def cmd_train(args) -> int:
    from .harness.report import plot_history, write_rows
    from .harness.train import train
    from .model import build, save_checkpoint

    ModelConfig, model_kw, tcfg = _configs(args)
    train_set, val_set, boundary, names = _load_split(args)
    if "num_classes" not in model_kw and names:
        model_kw["num_classes"] = len(names)
    if "input_size" not in model_kw and train_set:
        h, w = train_set[0].hw
        model_kw["input_size"] = int(np.ceil(max(h, w) / 32) * 32) if max(h, w) < 640 else 640
    mcfg = ModelConfig(**model_kw)
    model = build(mcfg)
    log.info("training %d images (%d val), classes %s, input %d", len(train_set), len(val_set),
             mcfg.num_classes, mcfg.input_size)
    hist = train(model, train_set, tcfg, val_set or None, class_names=names)
    save_checkpoint(model, args.out)
    rows = [list(e.row().values()) for e in hist.epochs]
    for e in hist.epochs:
        mAP = "" if e.val is None else f"  val mAP {e.val.mAP:.4f}"
        print(f"epoch {e.epoch:3d}  total {e.total:.4f}  cls {e.cls:.4f}  box {e.box:.4f}  lr {e.lr_end:.2e}{mAP}")
    if args.report:
        rep = Path(args.report)
        rep.mkdir(parents=True, exist_ok=True)
        header = list(hist.epochs[0].row().keys())
        write_rows(rep / "history.csv", header, rows)
        plot_history(hist, rep / "loss_curve.png")
        if hist.final_val is not None:
            (rep / "final_eval.csv").write_text(hist.final_val.to_delimited(), "utf-8")
        print(f"report written to {rep}")
    if boundary:
        print(f"validation split starts at {boundary}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.report import plot_pr_curves, write_eval
    from .harness.train import predict, prepare
    from .harness.evaluate import evaluate
    from .model import load_checkpoint

    model = load_checkpoint(args.ckpt)
    _, val_set, boundary, names = _load_split(args)
    data = prepare(val_set, model.config.input_size, model.stem.conv.weight.dtype)
    dets = predict(model, data, args.conf, args.nms_iou)
    report = evaluate(dets, data.orig_gts, args.iou, model.config.num_classes, names, boundary)
    print(report.table())
    out = Path(args.out)
    write_eval(report, out)
    fig = Path(args.figure) if args.figure else out.with_suffix(".png")
    plot_pr_curves(dets, data.orig_gts, model.config.num_classes, fig, names, args.iou)
    print(f"table written to {out}; PR curves to {fig}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness.report import plot_bench, write_rows
    from .model import ModelConfig, ablation_grid

    model_kw, _ = load_config(args.config)
    model_kw["input_size"] = args.input
    base = ModelConfig(**model_kw)
    rows = ablation_grid(base, args.input)
    header = ["c2f_kind", "ppa", "params", "buffers", "flops", "conv_flops"]
    widths = [10, 4, 10, 8, 14, 14]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        vals = [r["c2f_kind"], "on" if r["ppa"] else "off", r["params"], r["buffers"], r["flops"], r["conv_flops"]]
        print("  ".join(str(v).rjust(w) for v, w in zip(vals, widths)))
    for ppa in (False, True):
        c2f = next(r for r in rows if r["c2f_kind"] == "bottleneck" and r["ppa"] == ppa)
        pc2f = next(r for r in rows if r["c2f_kind"] == "faster" and r["ppa"] == ppa)
        red = 1 - pc2f["params"] / c2f["params"]
        print(f"PPA {'on ' if ppa else 'off'}: C2F params {c2f['params']}  PC2F params {pc2f['params']}  "
              f"reduction {100 * red:.2f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "bench.csv", header, [[r[h] for h in header] for r in rows])
        plot_bench(rows, out / "bench.png")
        print(f"bench table and figure written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .harness.gradsuite import run_group

    seeds = tuple(range(args.seeds))
    failed = 0
    for r in run_group(args.module, seeds):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.group}.{r.name}  seed={r.seed}  max_rel_err={r.max_rel_err:.3e}  "
              f"tol={r.tol:g}  checked={r.checked}  kinks={r.excluded}")
    print(f"{failed} failure(s)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect(args) -> int:
    from .model import read_manifest

    m = read_manifest(args.ckpt)
    print(f"format {m.get('format')} version {m.get('version')}")
    print("config " + json.dumps(m["config"], sort_keys=True))
    total = 0
    for t in m["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        total += n if t["kind"] == "param" else 0
        print(f"{t['kind']:6s}  {t['dtype']:4s}  {str(tuple(t['shape'])):20s}  {t['name']}")
    print(f"{len(m['tensors'])} tensors, {total} learned scalars")
    return EXIT_OK


def cmd_attention(args) -> int:
    from .harness.dataset import decode_ppm
    from .harness.postprocess import letterbox
    from .model import load_checkpoint
    from .tensor import Tensor, no_grad

    model = load_checkpoint(args.ckpt)
    if model.ppa_module() is None:
        print("checkpoint has no PPA module", file=sys.stderr)
        return EXIT_USAGE
    img, _ = letterbox(decode_ppm(Path(args.image).read_bytes()).data, model.config.input_size)
    model.eval()
    with no_grad():
        model(Tensor(img[None]))
    with open(args.out, "w") as fh:
        model.ppa_module().attention_maps().write(fh)
    print(f"attention maps written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="yoloppa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=300)
    g.add_argument("--val-images", type=int, default=60)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--freq", type=_floats, default=None)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def data_args(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--data", help="dataset directory written by gen-data")
        src.add_argument("--gtsdb", help="GTSDB directory (gt.txt + PPM images)")
        sp.add_argument("--gtsdb-mode", choices=("coarse", "fine"), default="coarse")

    t = sub.add_parser("train", help="train a model")
    data_args(t)
    t.add_argument("--config")
    t.add_argument("--cls-loss", choices=("ce", "ap"))
    t.add_argument("--c2f", choices=("bottleneck", "faster"))
    t.add_argument("--ppa", type=_on_off)
    t.add_argument("--input", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--report", help="directory for history.csv and loss_curve.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    e.add_argument("--ckpt", required=True)
    data_args(e)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--conf", type=float, default=0.001)
    e.add_argument("--nms-iou", type=float, default=0.45)
    e.add_argument("--out", default="eval.csv")
    e.add_argument("--figure", help="PR-curve image (default: next to --out)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="params/FLOPs for the four ablation builds")
    b.add_argument("--config")
    b.add_argument("--input", type=int, default=640)
    b.add_argument("--out", help="directory for bench.csv and bench.png")
    b.set_defaults(func=cmd_bench)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--module", required=True, choices=("tensor", "blocks", "ppa", "losses", "model"))
    gc.add_argument("--seeds", type=int, default=5)
    gc.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="list a checkpoint manifest")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)

    a = sub.add_parser("attention", help="dump PPA attention maps for one image")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    from .harness.dataset import DatasetError
    from .harness.synthetic import SyntheticConfigError
    from .harness.train import NonFiniteLossError, TrainConfigError
    from .model import CheckpointError, ConfigError
    from .tensor import NonFiniteError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLossError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ConfigFileError, TrainConfigError, SyntheticConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
