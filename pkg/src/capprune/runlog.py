"""Append-only JSONL metrics stream."""

from __future__ import annotations

import json
import math
from pathlib import Path

from .errors import RunError


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


class MetricsLog:
    """One JSON object per line. Opening checks the directory is writable."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise RunError(f"cannot write metrics to {self.path}: {exc}") from exc

    def emit(self, record: dict, flush: bool = False) -> None:
        self._fh.write(json.dumps(_clean(record), sort_keys=True) + "\n")
        if flush:
            self._fh.flush()

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics(path, record: dict) -> None:
    with MetricsLog(path) as log:
        log.emit(record, flush=True)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
