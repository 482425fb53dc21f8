"""Datasets: synthetic task families sharing one vocabulary, and a TSV loader."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .errors import ConfigError, InputError
from .model import CLS_ID, MASK_ID, N_SPECIAL, PAD_ID, SEP_ID, UNK_ID

FAMILIES = ("keyword", "pair", "prefix")

# All families draw content tokens from the same id range, so an encoder trained
# on one family sees the others' tokens during pre-training and probing.
CONTENT_LOW = N_SPECIAL


@dataclass
class LabeledBatch:
    input_ids: torch.Tensor  # (B, L) long
    attention_mask: torch.Tensor  # (B, L) bool
    labels: torch.Tensor  # (B,) long
    example_index: torch.Tensor  # (B,) long, index into the owning TaskData

    def __len__(self) -> int:
        return self.input_ids.shape[0]


@dataclass
class TaskData:
    name: str
    sequences: list[np.ndarray]
    labels: np.ndarray
    n_classes: int
    vocab: dict[str, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise InputError("sequences and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError("labels must be contiguous integers from 0")

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices) -> LabeledBatch:
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) == 0:
            raise InputError("empty batch")
        seqs = [self.sequences[i] for i in indices]
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        for row, s in enumerate(seqs):
            ids[row, : len(s)] = s
        ids_t = torch.from_numpy(ids)
        return LabeledBatch(
            input_ids=ids_t,
            attention_mask=ids_t != PAD_ID,
            labels=torch.from_numpy(self.labels[indices]),
            example_index=torch.from_numpy(indices),
        )

    def iter_batches(
        self, batch_size: int, rng: np.random.Generator | None = None
    ) -> Iterator[LabeledBatch]:
        """Yield batches in a fixed order, or shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])

    def subset(self, indices) -> "TaskData":
        indices = np.asarray(indices, dtype=np.int64)
        return TaskData(self.name, [self.sequences[i] for i in indices], self.labels[indices], self.n_classes, self.vocab)


# ---------------------------------------------------------------------------
# synthetic families


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _filler(rng, vocab_size, length, exclude=()) -> np.ndarray:
    out = rng.integers(CONTENT_LOW, vocab_size, size=length)
    if exclude:
        bad = np.isin(out, list(exclude))
        while bad.any():
            out[bad] = rng.integers(CONTENT_LOW, vocab_size, size=int(bad.sum()))
            bad = np.isin(out, list(exclude))
    return out


def _keyword_tokens(n_classes: int) -> list[int]:
    return [CONTENT_LOW + k for k in range(n_classes)]


def _prefix_table(n_classes: int, vocab_size: int) -> np.ndarray:
    # fixed across seeds so that dev and train share the class patterns
    table_rng = np.random.default_rng(7919)
    tokens = table_rng.choice(np.arange(CONTENT_LOW + 32, vocab_size), size=(n_classes, 2), replace=False)
    return tokens


def _make_keyword(rng, label, n_classes, vocab_size):
    keywords = _keyword_tokens(n_classes)
    length = int(rng.integers(8, 15))
    body = _filler(rng, vocab_size, length, exclude=keywords)
    body[int(rng.integers(0, length))] = keywords[label]
    return np.concatenate([[CLS_ID], body])


N_TOPICS = 8
TOPIC_WIDTH = 16
# topic bands sit above the keyword ids so the two families do not collide
TOPIC_LOW = CONTENT_LOW + 32


def _topic_tokens(rng, topic, length, width=TOPIC_WIDTH):
    """Tokens from the ``topic``-th band of ``width`` consecutive ids."""
    lo = TOPIC_LOW + topic * width
    return rng.integers(lo, lo + width, size=length)


def _make_pair(rng, label, vocab_size, span=5):
    a_topic = int(rng.integers(N_TOPICS))
    b_topic = a_topic if label == 1 else int((a_topic + rng.integers(1, N_TOPICS)) % N_TOPICS)
    a = _topic_tokens(rng, a_topic, span)
    b = _topic_tokens(rng, b_topic, span)
    # one off-topic distractor per segment
    a[int(rng.integers(span))] = _filler(rng, vocab_size, 1)[0]
    b[int(rng.integers(span))] = _filler(rng, vocab_size, 1)[0]
    return np.concatenate([[CLS_ID], a, [SEP_ID], b])


def _make_prefix(rng, label, table, vocab_size):
    length = int(rng.integers(6, 12))
    body = _filler(rng, vocab_size, length, exclude=set(table.ravel().tolist()))
    return np.concatenate([[CLS_ID], table[label], body])


def max_classes(family: str, vocab_size: int = 1000) -> int:
    if family == "pair":
        return 2
    if family == "keyword":
        return 16
    if family == "prefix":
        return min(16, (vocab_size - CONTENT_LOW - 32) // 2)
    raise ConfigError(f"unknown synthetic family {family!r}", "data.family")


def generate_synthetic_task(
    family_id: str,
    n_examples: int,
    n_classes: int,
    seed: int,
    *,
    vocab_size: int = 1000,
    dev_fraction: float = 0.25,
) -> tuple[TaskData, TaskData]:
    """Build a balanced ``(train, dev)`` pair for one synthetic family.

    Families:
        keyword: the class-``k`` keyword token appears once somewhere in the sequence.
        pair: ``[CLS] A [SEP] B``; a block of ids is split into topic bands and
            each segment is drawn mostly from one band. Label 1 when both
            segments share a topic.
        prefix: the sequence opens with a class-specific token bigram.
    """
    if n_classes < 2:
        raise ConfigError("need at least 2 classes", "data.n_classes")
    if n_classes > max_classes(family_id, vocab_size):
        raise ConfigError(
            f"family {family_id!r} supports at most {max_classes(family_id, vocab_size)} classes",
            "data.n_classes",
        )
    if n_examples < n_classes:
        raise ConfigError("fewer examples than classes", "data.n_examples")
    rng = np.random.default_rng([seed, FAMILIES.index(family_id)])
    table = _prefix_table(n_classes, vocab_size) if family_id == "prefix" else None

    def build(n):
        labels = _balanced_labels(n, n_classes, rng)
        seqs = []
        for y in labels:
            if family_id == "keyword":
                seqs.append(_make_keyword(rng, y, n_classes, vocab_size))
            elif family_id == "pair":
                seqs.append(_make_pair(rng, y, vocab_size))
            else:
                seqs.append(_make_prefix(rng, y, table, vocab_size))
        return seqs, labels

    train = TaskData(family_id, *build(n_examples), n_classes)
    n_dev = max(n_classes, int(round(n_examples * dev_fraction)))
    dev = TaskData(family_id, *build(n_dev), n_classes)
    return train, dev


def pretraining_corpus(n_examples: int, seed: int, vocab_size: int = 1000) -> list[np.ndarray]:
    """Unlabeled mixture of every family, used for the masked-token warm start."""
    per = max(1, n_examples // len(FAMILIES))
    seqs: list[np.ndarray] = []
    for fam in FAMILIES:
        n_cls = 2 if fam == "pair" else 4
        train, _ = generate_synthetic_task(fam, per, n_cls, seed + 10_007, vocab_size=vocab_size)
        seqs.extend(train.sequences)
    return seqs


# ---------------------------------------------------------------------------
# TSV


def _read_tsv(path: Path) -> list[tuple[list[str], int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise InputError(f"{path}:{lineno}: expected 'text<TAB>label'")
            text, label = line.rsplit("\t", 1)
            try:
                y = int(label.strip())
            except ValueError:
                raise InputError(f"{path}:{lineno}: label {label!r} is not an integer") from None
            rows.append((text.split(), y))
    return rows


def load_tsv_dataset(train_path, dev_path, max_seq_len: int = 32) -> tuple[TaskData, TaskData]:
    """Load ``text<TAB>label`` files with whitespace tokenization.

    The vocabulary is built from the train split; dev tokens not seen in train
    map to the unknown id.
    """
    train_rows = _read_tsv(Path(train_path))
    dev_rows = _read_tsv(Path(dev_path))
    if not train_rows:
        raise InputError(f"{train_path}: no examples")
    vocab = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[SEP]": SEP_ID, "[UNK]": UNK_ID, "[MASK]": MASK_ID}
    for toks, _ in train_rows:
        for tok in toks:
            vocab.setdefault(tok, len(vocab))
    labels = sorted({y for _, y in train_rows} | {y for _, y in dev_rows})
    if labels != list(range(len(labels))):
        raise InputError(f"labels must be contiguous integers from 0, got {labels}")
    n_classes = max(2, len(labels))

    def convert(rows):
        seqs = [
            np.array([CLS_ID] + [vocab.get(t, UNK_ID) for t in toks][: max_seq_len - 1], dtype=np.int64)
            for toks, _ in rows
        ]
        return seqs, np.array([y for _, y in rows], dtype=np.int64)

    name = Path(train_path).stem
    return (
        TaskData(name, *convert(train_rows), n_classes, vocab),
        TaskData(name, *convert(dev_rows), n_classes, vocab),
    )
