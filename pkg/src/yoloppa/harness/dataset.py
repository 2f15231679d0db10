"""Samples, the binary PPM codec and the GTSDB-style ground-truth index.

A dataset directory holds one image per file (binary PPM) and an index file
``gt.txt`` with one ``filename;left;top;right;bottom;classID`` record per box.
Images without boxes simply do not appear in the index unless listed in an
optional ``images.txt``.  Synthetic sets written by :func:`write_dataset` use
the same layout plus ``classes.txt`` so they can be read back without a class
mapping.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..tensor import Tensor
from ..types import BoxError, BoxXYXY, GroundTruthBox

log = logging.getLogger(__name__)

INDEX_NAME = "gt.txt"
IMAGES_NAME = "images.txt"
CLASSES_NAME = "classes.txt"


class DatasetError(Exception):
    """Base class for dataset I/O failures."""


class PPMError(DatasetError):
    code = "ppm_error"


class UnsupportedMagicError(PPMError):
    code = "unsupported_magic"


class UnsupportedMaxvalError(PPMError):
    code = "unsupported_maxval"


class TruncatedImageError(PPMError):
    code = "truncated_payload"


class MissingImagesError(DatasetError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"index references {len(self.missing)} missing image(s): {', '.join(self.missing)}")


@dataclass
class Sample:
    image: Tensor  # 3×H×W in [0, 1]
    gts: List[GroundTruthBox]
    source: str

    def __post_init__(self):
        _, h, w = self.image.shape
        for g in self.gts:
            b = g.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                raise BoxError(f"{self.source}: box {b} outside the {w}×{h} image")

    @property
    def hw(self) -> tuple:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(blob: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens after the magic and the
    offset of the single whitespace byte that ends the header."""
    pos = 2
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise TruncatedImageError("truncated payload: PPM header incomplete")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise TruncatedImageError("truncated payload: PPM header not terminated")
    return tokens, pos + 1


def decode_ppm(blob: bytes) -> Tensor:
    """Binary P6, maxval 255 -> channel-planar float tensor with values v/255."""
    if blob[:2] != b"P6":
        raise UnsupportedMagicError(f"unsupported magic {blob[:2]!r}; only binary P6 is read")
    tokens, start = _header_tokens(blob, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PPMError(f"malformed PPM header {tokens!r}") from exc
    if maxval != 255:
        raise UnsupportedMaxvalError(f"unsupported maxval {maxval}; only 255 is read")
    if w <= 0 or h <= 0:
        raise PPMError(f"invalid PPM size {w}×{h}")
    need = w * h * 3
    if len(blob) - start < need:
        raise TruncatedImageError(f"truncated payload: {len(blob) - start} of {need} bytes")
    px = np.frombuffer(blob, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    return Tensor(np.transpose(px, (2, 0, 1)).astype(np.float32) / 255.0, dtype=np.float32)


def encode_ppm(image) -> bytes:
    """Inverse of :func:`decode_ppm` (values are rounded to the nearest level)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    c, h, w = arr.shape
    if c != 3:
        raise PPMError(f"PPM needs 3 channels, got {c}")
    px = np.clip(np.rint(np.transpose(arr, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


# ---------------------------------------------------------------------------
# ground-truth index
# ---------------------------------------------------------------------------

@dataclass
class Reject:
    line_no: int
    text: str
    reason: str


@dataclass
class IndexRecord:
    filename: str
    box: BoxXYXY
    cls: int
    line_no: int


@dataclass
class LoadReport:
    total_lines: int = 0
    accepted: int = 0
    rejects: List[Reject] = field(default_factory=list)

    def summary(self) -> str:
        return f"{self.total_lines} lines: {self.accepted} accepted, {len(self.rejects)} rejected"


def parse_index(text: str, report: Optional[LoadReport] = None) -> List[IndexRecord]:
    """Parse ``filename;left;top;right;bottom;classID`` lines.

    Blank lines are not counted.  Every counted line is either accepted or
    recorded as a reject with its 1-based line number.
    """
    report = report if report is not None else LoadReport()
    records = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        report.total_lines += 1
        parts = line.split(";")
        if len(parts) != 6:
            report.rejects.append(Reject(no, raw, f"expected 6 fields, got {len(parts)}"))
            continue
        name = parts[0].strip()
        try:
            l, t, r, b = (float(p) for p in parts[1:5])
            cls = int(parts[5])
        except ValueError:
            report.rejects.append(Reject(no, raw, "non-numeric coordinate or class"))
            continue
        if not name:
            report.rejects.append(Reject(no, raw, "empty filename"))
            continue
        if cls < 0:
            report.rejects.append(Reject(no, raw, f"negative class {cls}"))
            continue
        try:
            box = BoxXYXY(l, t, r, b)
        except BoxError as exc:
            report.rejects.append(Reject(no, raw, str(exc)))
            continue
        records.append(IndexRecord(name, box, cls, no))
        report.accepted += 1
    return records


COARSE_ORDER = ("prohibitory", "danger", "mandatory", "other")


def coarse_mapping(path: Optional[Path] = None) -> tuple:
    """Read the ``classID;category`` table. Returns (id -> coarse index, category names)."""
    if path is None:
        text = resources.files("yoloppa").joinpath("data/gtsdb_coarse.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            cid, cat = (s.strip() for s in line.split(";"))
            rows.append((int(cid), cat))
    # the four standard categories keep their fixed indices; any extra category
    # a user adds to the table follows in order of first appearance
    names = [c for c in COARSE_ORDER if any(cat == c for _, cat in rows)]
    for _, cat in rows:
        if cat not in names:
            names.append(cat)
    return {cid: names.index(cat) for cid, cat in rows}, names


def _read_image(path: Path) -> Tensor:
    return decode_ppm(path.read_bytes())


def load_gtsdb(directory, mode: str = "coarse", index_name: str = INDEX_NAME,
               mapping_path=None, report: Optional[LoadReport] = None) -> List[Sample]:
    """Load a GTSDB-layout directory.

    ``mode`` is ``coarse`` (4 major categories via the shipped table),
    ``fine`` (subcategory IDs as-is) or ``identity`` (class IDs as written,
    used for synthetic sets).  Boxes that fall outside their image or whose
    class has no mapping are added to ``report.rejects``.
    """
    directory = Path(directory)
    report = report if report is not None else LoadReport()
    index_path = directory / index_name
    text = index_path.read_text("utf-8")
    records = parse_index(text, report)
    if report.total_lines == 0:
        log.warning("empty ground-truth index %s", index_path)

    mapping = None
    if mode == "coarse":
        mapping, _ = coarse_mapping(mapping_path)
    elif mode not in ("fine", "identity"):
        raise ValueError(f"mode must be coarse, fine or identity, got {mode!r}")

    names = sorted({r.filename for r in records})
    extra = directory / IMAGES_NAME
    if extra.exists():
        names = sorted(set(names) | {s.strip() for s in extra.read_text("utf-8").splitlines() if s.strip()})
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise MissingImagesError(missing)

    by_name: dict = {n: [] for n in names}
    for r in records:
        by_name[r.filename].append(r)
    samples = []
    for name in names:
        img = _read_image(directory / name)
        _, h, w = img.shape
        gts = []
        for r in by_name[name]:
            b = r.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                _demote(report, r, text, f"box outside the {w}×{h} image")
                continue
            cls = r.cls
            if mapping is not None:
                if cls not in mapping:
                    _demote(report, r, text, f"class {cls} missing from the coarse table")
                    continue
                cls = mapping[cls]
            gts.append(GroundTruthBox(cls, b))
        samples.append(Sample(img, gts, name))
    return samples


def _demote(report: LoadReport, rec: IndexRecord, text: str, reason: str) -> None:
    report.accepted -= 1
    report.rejects.append(Reject(rec.line_no, text.splitlines()[rec.line_no - 1], reason))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(samples: Sequence[Sample], directory, class_names: Sequence[str]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        (directory / s.source).write_bytes(encode_ppm(s.image))
        for g in s.gts:
            b = g.box
            lines.append(f"{s.source};{b.x1!r};{b.y1!r};{b.x2!r};{b.y2!r};{g.cls}")
    (directory / INDEX_NAME).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")
    (directory / IMAGES_NAME).write_text("\n".join(s.source for s in samples) + "\n", "utf-8")
    (directory / CLASSES_NAME).write_text("\n".join(class_names) + "\n", "utf-8")


def read_class_names(directory) -> Optional[list]:
    p = Path(directory) / CLASSES_NAME
    if not p.exists():
        return None
    return [s.strip() for s in p.read_text("utf-8").splitlines() if s.strip()]


def load_dataset(directory, report: Optional[LoadReport] = None) -> List[Sample]:
    """Read a directory written by :func:`write_dataset` (class IDs used as-is)."""
    return load_gtsdb(directory, mode="identity", report=report)


def split_dataset(directory, loader, val_fraction: float = 0.2) -> tuple:
    """(train, val, boundary).  Uses ``train/`` and ``val/`` subdirectories when
    present, otherwise the first 80% of filenames in sorted order train."""
    directory = Path(directory)
    if (directory / "train").is_dir() and (directory / "val").is_dir():
        return loader(directory / "train"), loader(directory / "val"), None
    samples = loader(directory)
    samples = sorted(samples, key=lambda s: s.source)
    cut = int(round(len(samples) * (1 - val_fraction)))
    boundary = samples[cut].source if cut < len(samples) else None
    return samples[:cut], samples[cut:], boundary
