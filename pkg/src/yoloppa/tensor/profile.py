"""Per-layer operation accounting hooked into the tensor kernels."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field


@dataclass
class OpEntry:
    scope: str
    kind: str
    macs: int = 0
    elementwise: int = 0
    detail: dict = field(default_factory=dict)


class _Local(threading.local):
    def __init__(self):
        self.recorder = None
        self.scopes = []


_local = _Local()


class OpRecorder:
    def __init__(self):
        self.entries: list[OpEntry] = []

    def __enter__(self):
        if _local.recorder is not None:
            raise RuntimeError("an OpRecorder is already active on this thread")
        _local.recorder = self
        return self

    def __exit__(self, *exc):
        _local.recorder = None
        return False


def active() -> bool:
    return _local.recorder is not None


def record(kind: str, macs: int = 0, elementwise: int = 0, **detail) -> None:
    rec = _local.recorder
    if rec is None:
        return
    scope = ".".join(_local.scopes) if _local.scopes else "<root>"
    rec.entries.append(OpEntry(scope, kind, int(macs), int(elementwise), detail))


@contextlib.contextmanager
def scope(name: str):
    _local.scopes.append(name)
    try:
        yield
    finally:
        _local.scopes.pop()
