"""Multi-positive InfoNCE over pre-encoded representation sets.

Three contrast modules share one loss and differ only in which frozen model
encoded the contrast set and how positives are chosen:

* ``prc``: pre-trained model
* ``snc``: snapshots captured earlier in the pruning run (lower sparsity)
* ``fic``: fine-tuned model

In unsupervised mode the positive for anchor ``i`` is the entry encoding the
same example; in supervised mode it is every entry sharing the anchor's label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericalDegeneracyError

MODULES = ("prc", "snc", "fic")
MODES = ("unsup", "sup")
MODULE_ROLE = {"prc": "pretrained", "snc": "snapshot", "fic": "finetuned"}


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    bank_size: int = 4096
    modules: list[str] = field(default_factory=lambda: list(MODULES))
    sup: bool = True
    unsup: bool = True
    snc_aggregation: str = "per_snapshot"  # or "pooled"
    resample_each_step: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("must be > 0", "contrastive.temperature")
        if self.bank_size < 1:
            raise ConfigError("must be >= 1", "contrastive.bank_size")
        for m in self.modules:
            if m not in MODULES:
                raise ConfigError(f"unknown module {m!r}", "contrastive.modules")
        if self.snc_aggregation not in ("per_snapshot", "pooled"):
            raise ConfigError(f"unknown aggregation {self.snc_aggregation!r}", "contrastive.snc_aggregation")


@dataclass
class EntryMeta:
    """Per-entry metadata of a fetched contrast set."""

    example_index: np.ndarray
    labels: np.ndarray
    role: np.ndarray  # str per entry
    sparsity: np.ndarray  # source-model sparsity (%) per entry

    def __len__(self) -> int:
        return len(self.example_index)


@dataclass
class PositiveSet:
    anchor_index: int
    positive_indices: np.ndarray
    module: str
    mode: str

    def __len__(self) -> int:
        return len(self.positive_indices)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}", "contrastive.temperature")


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalDegeneracyError("zero-norm representation; cosine similarity undefined")
    return x / norms


def cosine_similarity(z_a, z_b) -> torch.Tensor:
    z_a = torch.as_tensor(z_a)
    z_b = torch.as_tensor(z_b, dtype=z_a.dtype)
    return (_normalize(z_a) * _normalize(z_b)).sum(-1)


def similarity_matrix(anchors: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every anchor row against every entry row."""
    return _normalize(anchors) @ _normalize(entries.to(anchors.dtype)).T


def contrast_per_anchor(
    anchors: torch.Tensor, entries: torch.Tensor, positive_mask: torch.Tensor, tau: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor loss and a validity flag (anchor has at least one positive).

    The softmax denominator runs over all entries, positives included.
    """
    _check_tau(tau)
    logits = similarity_matrix(anchors, entries) / tau
    # logsumexp as max + log1p(rest) so a near-zero loss keeps its relative precision
    top, arg = logits.max(dim=1, keepdim=True)
    shifted = torch.exp(logits - top).scatter(1, arg, 0.0)
    neg_log_prob = (top - logits) + torch.log1p(shifted.sum(1, keepdim=True))
    pos = positive_mask.to(neg_log_prob.dtype)
    n_pos = pos.sum(1)
    loss = (neg_log_prob * pos).sum(1) / n_pos.clamp_min(1.0)
    return loss, n_pos > 0


def info_nce(anchor, bank_entries, positives, tau: float) -> torch.Tensor:
    """Contrastive loss for a single anchor against ``N`` bank entries.

    Args:
        anchor: ``(d,)`` representation.
        bank_entries: ``(N, d)`` contrast set.
        positives: indices into ``bank_entries`` or a :class:`PositiveSet`.
        tau: temperature.
    """
    anchor = torch.as_tensor(anchor)
    bank_entries = torch.as_tensor(bank_entries, dtype=anchor.dtype)
    idx = positives.positive_indices if isinstance(positives, PositiveSet) else positives
    idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
    if idx.numel() == 0:
        raise ValueError("empty positive set")
    if bank_entries.ndim != 2 or bank_entries.shape[0] < 1:
        raise ValueError("bank_entries must be a non-empty (N, d) array")
    mask = torch.zeros(1, bank_entries.shape[0], dtype=torch.bool)
    mask[0, idx] = True
    loss, _ = contrast_per_anchor(anchor[None], bank_entries, mask, tau)
    return loss[0]


def positive_mask(
    module: str,
    mode: str,
    anchor_index,
    anchor_labels,
    meta: EntryMeta,
    current_sparsity: float | None = None,
) -> np.ndarray:
    """``(B, N)`` boolean matrix of positives for a batch of anchors."""
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    anchor_index = np.atleast_1d(np.asarray(anchor_index))
    anchor_labels = np.atleast_1d(np.asarray(anchor_labels))
    source_ok = np.asarray(meta.role) == MODULE_ROLE[module]
    if module == "snc":
        if current_sparsity is None:
            raise ValueError("snc positives need the current sparsity")
        source_ok &= np.asarray(meta.sparsity, dtype=float) < current_sparsity
    if mode == "unsup":
        match = anchor_index[:, None] == np.asarray(meta.example_index)[None, :]
    else:
        match = anchor_labels[:, None] == np.asarray(meta.labels)[None, :]
    return match & source_ok[None, :]


def build_positive_set(
    module: str,
    mode: str,
    anchor_example_index: int,
    anchor_label: int,
    bank_metadata: EntryMeta,
    current_sparsity: float | None = None,
) -> PositiveSet:
    row = positive_mask(module, mode, anchor_example_index, anchor_label, bank_metadata, current_sparsity)[0]
    return PositiveSet(int(anchor_example_index), np.flatnonzero(row), module, mode)


@dataclass
class ContrastSet:
    """Vectors plus metadata for one fetched contrast set."""

    vectors: torch.Tensor
    meta: EntryMeta

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _set_loss(module, anchors, anchor_index, anchor_labels, cset, config, current_sparsity):
    total = anchors.new_zeros(())
    for mode, enabled in (("unsup", config.unsup), ("sup", config.sup)):
        if not enabled:
            continue
        mask = positive_mask(module, mode, anchor_index, anchor_labels, cset.meta, current_sparsity)
        per_anchor, valid = contrast_per_anchor(
            anchors, cset.vectors, torch.from_numpy(mask), config.temperature
        )
        if bool(valid.any()):
            total = total + per_anchor[valid].mean()
    return total


def _pool_sets(sets: Sequence[ContrastSet]) -> ContrastSet:
    meta = EntryMeta(
        example_index=np.concatenate([s.meta.example_index for s in sets]),
        labels=np.concatenate([s.meta.labels for s in sets]),
        role=np.concatenate([s.meta.role for s in sets]),
        sparsity=np.concatenate([s.meta.sparsity for s in sets]),
    )
    return ContrastSet(torch.cat([s.vectors for s in sets]), meta)


def module_loss(
    module: str,
    anchors: torch.Tensor,
    anchor_index,
    anchor_labels,
    banks,
    config: ContrastiveConfig,
    current_sparsity: float | None = None,
) -> torch.Tensor:
    """Mean-over-anchors unsupervised plus supervised loss for one module.

    ``banks`` is one :class:`ContrastSet` for ``prc``/``fic`` and a sequence of
    them (one per snapshot) for ``snc``. Anchors without any positive are left
    out of that part's mean. Snapshot sets with sparsity not below
    ``current_sparsity`` are ignored; the remaining sets are contrasted
    separately and averaged, or merged into one set when
    ``config.snc_aggregation == "pooled"``.
    """
    zero = anchors.new_zeros(())
    if module not in config.modules or not (config.sup or config.unsup):
        return zero
    anchor_index = np.asarray(anchor_index)
    anchor_labels = np.asarray(anchor_labels)
    if module != "snc":
        if banks is None:
            return zero
        return _set_loss(module, anchors, anchor_index, anchor_labels, banks, config, None)

    if current_sparsity is None:
        raise ValueError("snc needs the current sparsity")
    eligible = [s for s in (banks or []) if len(s) and float(s.meta.sparsity[0]) < current_sparsity]
    if not eligible:
        return zero
    if config.snc_aggregation == "pooled":
        return _set_loss(module, anchors, anchor_index, anchor_labels, _pool_sets(eligible), config, current_sparsity)
    losses = [
        _set_loss(module, anchors, anchor_index, anchor_labels, s, config, current_sparsity) for s in eligible
    ]
    return torch.stack(losses).mean()
