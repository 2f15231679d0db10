"""Checkpoint file format.

Layout::

    b"YPPA"                      magic
    uint32 LE                    format version
    uint64 LE                    manifest byte length
    manifest                     UTF-8 JSON: config + ordered tensor list
    raw values                   little-endian, in manifest order

Each manifest tensor entry holds ``name``, ``shape``, ``dtype`` and ``kind``
(``param`` or ``buffer``).  Order is the model's graph order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ConfigError, ModelConfig, YoloPPA, build

MAGIC = b"YPPA"
VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class ManifestMismatchError(CheckpointError):
    code = "manifest_mismatch"


class TruncatedPayloadError(CheckpointError):
    code = "truncated_payload"


def _manifest(model: YoloPPA) -> dict:
    tensors = []
    for name, arr, is_param in model.state_items():
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                        "kind": "param" if is_param else "buffer"})
    return {"format": "yoloppa-checkpoint", "version": VERSION,
            "config": model.config.to_dict(), "tensors": tensors}


def save_checkpoint(model: YoloPPA, path) -> None:
    manifest = json.dumps(_manifest(model), indent=1, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for _, arr, _ in model.state_items():
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_manifest(path) -> dict:
    blob = Path(path).read_bytes()
    manifest, _ = _parse_header(blob)
    return manifest


def _parse_header(blob: bytes):
    if len(blob) < 16:
        raise TruncatedPayloadError("truncated payload: file shorter than the header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + mlen:
        raise TruncatedPayloadError("truncated payload: manifest cut short")
    try:
        manifest = json.loads(blob[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    return manifest, 16 + mlen


def load_checkpoint(path, config: ModelConfig = None) -> YoloPPA:
    """Rebuild the model and fill it from ``path``.

    The graph is rebuilt from ``config`` when given, else from the embedded
    config, and every manifest entry must match it by name and shape.
    """
    blob = Path(path).read_bytes()
    manifest, offset = _parse_header(blob)
    try:
        embedded = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise ManifestMismatchError(f"manifest mismatch: embedded config invalid ({exc})") from exc
    model = build(config if config is not None else embedded)
    items = model.state_items()
    entries = manifest.get("tensors", [])
    if len(entries) != len(items):
        raise ManifestMismatchError(
            f"manifest mismatch: file lists {len(entries)} tensors, graph has {len(items)}"
        )
    arrays = []
    for entry, (name, arr, _) in zip(entries, items):
        if entry["name"] != name or tuple(entry["shape"]) != arr.shape:
            raise ManifestMismatchError(
                f"manifest mismatch at tensor {entry['name']!r}: file {tuple(entry['shape'])}, "
                f"graph {name!r} {arr.shape}"
            )
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        nbytes = dt.itemsize * int(np.prod(arr.shape))
        if offset + nbytes > len(blob):
            raise TruncatedPayloadError(f"truncated payload while reading tensor {name!r}")
        arrays.append(np.frombuffer(blob, dtype=dt, count=int(np.prod(arr.shape)), offset=offset)
                      .reshape(arr.shape).astype(dt.newbyteorder("=")))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the payload")

    dtypes = {a.dtype for a in arrays}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    params = dict(model.named_parameters())
    for (name, _, is_param), arr in zip(model.state_items(), arrays):
        if is_param:
            params[name].data = np.ascontiguousarray(arr)
        else:
            _set_buffer(model, name, arr)
    return model


def _set_buffer(model, dotted: str, arr: np.ndarray) -> None:
    *path, leaf = dotted.split(".")
    mod = model
    for p in path:
        mod = mod._children[p]
    mod._buffers[leaf] = arr.copy()
    object.__setattr__(mod, leaf, mod._buffers[leaf])
