"""Pre-encoded representation banks held in host memory.

A bank is built once from a frozen model and then only read. Each training
step fetches at most ``N`` entries from it; only that slice is turned into a
tensor for the loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .contrastive import ContrastSet, EntryMeta
from .data import TaskData
from .errors import InputError

BANK_ROLES = ("pretrained", "finetuned", "snapshot")
_MAGIC = b"RBNK"
_HEADER = struct.Struct("<4sIQ")  # magic, dim, count


class FetchCounter:
    """Counts values handed out by :func:`fetch`, per source bank."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.fetches = 0
        self.values_served = 0
        self.max_values_per_fetch = 0

    def record(self, n_values: int) -> None:
        self.fetches += 1
        self.values_served += n_values
        self.max_values_per_fetch = max(self.max_values_per_fetch, n_values)


@dataclass(frozen=True)
class RepresentationBank:
    source_role: str
    source_sparsity: float
    example_index: np.ndarray  # (M,) int64
    labels: np.ndarray  # (M,) int64
    vectors: np.ndarray  # (M, d) float32
    created_at_step: int = 0

    def __post_init__(self):
        if self.source_role not in BANK_ROLES:
            raise ValueError(f"unknown bank role {self.source_role!r}")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.example_index) or len(self.labels) != len(self.example_index):
            raise ValueError("bank arrays disagree in length")
        for arr in (self.example_index, self.labels, self.vectors):
            arr.setflags(write=False)
        object.__setattr__(self, "counter", FetchCounter())

    def __len__(self) -> int:
        return len(self.example_index)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class FetchResult:
    positions: np.ndarray  # row positions within the bank
    example_index: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray
    source_role: str
    source_sparsity: float

    def __len__(self) -> int:
        return len(self.positions)

    def contrast_set(self, dtype=torch.float32) -> ContrastSet:
        n = len(self)
        meta = EntryMeta(
            example_index=self.example_index,
            labels=self.labels,
            role=np.full(n, self.source_role, dtype=object),
            sparsity=np.full(n, self.source_sparsity, dtype=float),
        )
        return ContrastSet(torch.as_tensor(self.vectors, dtype=dtype), meta)


@torch.no_grad()
def encode_bank(
    frozen_model,
    examples: TaskData,
    role: str,
    sparsity: float = 0.0,
    step: int = 0,
    batch_size: int = 256,
    example_index=None,
) -> RepresentationBank:
    """Encode every example with ``frozen_model`` and keep pooled vectors as fp32 numpy.

    ``example_index`` maps bank rows back to training-set indices when
    ``examples`` is a subset; it defaults to ``0..len(examples)-1``.
    """
    if len(examples) == 0:
        raise InputError("cannot encode an empty example list")
    was_training = frozen_model.training
    frozen_model.eval()
    chunks = []
    try:
        for batch in examples.iter_batches(batch_size):
            _, pooled = frozen_model.encode(batch.input_ids, batch.attention_mask)
            chunks.append(pooled.detach().cpu().numpy().astype(np.float32))
    finally:
        frozen_model.train(was_training)
    return RepresentationBank(
        source_role=role,
        source_sparsity=float(sparsity),
        example_index=(
            np.arange(len(examples), dtype=np.int64)
            if example_index is None
            else np.asarray(example_index, dtype=np.int64).copy()
        ),
        labels=np.asarray(examples.labels, dtype=np.int64).copy(),
        vectors=np.concatenate(chunks),
        created_at_step=step,
    )


def fetch(
    bank: RepresentationBank,
    n: int,
    rng: np.random.Generator,
    anchor_index=None,
) -> FetchResult:
    """Draw ``n`` entries from ``bank``.

    Entries for ``anchor_index`` (example indices of the current batch) are
    always included; the rest are sampled without replacement. When ``n`` is at
    least the bank size the whole bank comes back in stored order. Returned
    rows are in ascending bank order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    size = len(bank)
    if n >= size:
        pos = np.arange(size)
    else:
        forced = np.empty(0, dtype=np.int64)
        if anchor_index is not None:
            wanted = np.unique(np.asarray(anchor_index, dtype=np.int64))
            forced = np.flatnonzero(np.isin(bank.example_index, wanted))[:n]
        rest = np.setdiff1d(np.arange(size), forced, assume_unique=True)
        extra = rng.choice(rest, size=n - len(forced), replace=False)
        pos = np.sort(np.concatenate([forced, extra]))
    vectors = bank.vectors[pos]
    bank.counter.record(vectors.size)
    return FetchResult(
        positions=pos,
        example_index=bank.example_index[pos],
        labels=bank.labels[pos],
        vectors=vectors,
        source_role=bank.source_role,
        source_sparsity=bank.source_sparsity,
    )


def footprint(bank: RepresentationBank | None) -> tuple[int, int]:
    """``(entry_count, value_count)``."""
    if bank is None or len(bank) == 0:
        return 0, 0
    return len(bank), len(bank) * bank.dim


def footprint_for(entries: int, dim: int) -> tuple[int, int]:
    return entries, entries * dim


def save_bank(bank: RepresentationBank, path) -> Path:
    """Write ``<path>`` (header + contiguous fp32 rows) and ``<path>.json`` metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vec = np.ascontiguousarray(bank.vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, bank.dim, len(bank)))
        fh.write(vec.tobytes())
    meta = {
        "source_role": bank.source_role,
        "source_sparsity": bank.source_sparsity,
        "created_at_step": bank.created_at_step,
        "example_index": bank.example_index.tolist(),
        "labels": bank.labels.tolist(),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta))
    return path


def load_bank(path) -> RepresentationBank:
    path = Path(path)
    raw = path.read_bytes()
    magic, dim, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise InputError(f"{path}: not a representation bank")
    vectors = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=dim * count).reshape(count, dim)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return RepresentationBank(
        source_role=meta["source_role"],
        source_sparsity=meta["source_sparsity"],
        example_index=np.asarray(meta["example_index"], dtype=np.int64),
        labels=np.asarray(meta["labels"], dtype=np.int64),
        vectors=vectors.astype(np.float32),
        created_at_step=meta["created_at_step"],
    )
