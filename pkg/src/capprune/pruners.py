"""Pruning criteria and mask construction.

Unstructured criteria keep one score per weight entry in ``MaskedLinear.score``;
the structured first-order criterion scores whole blocks (attention heads and
FFN neurons) through :class:`ImportanceAccumulator`.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

import torch

from .errors import ConfigError, StateError
from .model import BlockPartition, EncoderClassifier, MaskedLinear

log = logging.getLogger(__name__)

CRITERIA = ("first_order", "movement", "soft_movement", "magnitude")


class DegenerateMaskWarning(UserWarning):
    pass


@dataclass
class ThresholdConfig:
    threshold: float = 0.0
    regularizer_weight: float = 1e-2

    def __post_init__(self):
        if self.regularizer_weight < 0:
            raise ConfigError("must be >= 0", "pruning.regularizer_weight")


class ImportanceAccumulator:
    """Running per-block first-order importance.

    Each call to :meth:`add` receives the signed per-block sums
    ``sum_{w in block} dL/dw * w`` for one batch. With ``abs_order="inside"``
    the absolute value is taken per batch before accumulating; with
    ``"outside"`` the signed sums accumulate and the absolute value is taken at
    read time.
    """

    def __init__(self, criterion: str = "first_order", abs_order: str = "inside"):
        if abs_order not in ("inside", "outside"):
            raise ConfigError(f"unknown abs_order {abs_order!r}", "pruning.abs_order")
        self.criterion = criterion
        self.abs_order = abs_order
        self.scores: dict[str, float] = defaultdict(float)
        self.step_count = 0

    def add(self, block_sums: Mapping[str, float]) -> None:
        for bid, v in block_sums.items():
            self.scores[bid] += abs(v) if self.abs_order == "inside" else v
        self.step_count += 1

    def reset(self) -> None:
        self.scores.clear()
        self.step_count = 0


@torch.no_grad()
def block_taylor_sums(model: EncoderClassifier, partition: BlockPartition) -> dict[str, float]:
    """Signed ``sum (dL/dw) * w`` per block, from the ``.grad`` left by the last backward."""
    sites = model.sites()
    prods = {}
    for sid, site in sites.items():
        g = site.weight.grad
        prods[sid] = torch.zeros_like(site.weight) if g is None else (g * site.weight).double()
    out = {}
    for blk in partition.blocks:
        out[blk.block_id] = float(sum(prods[s.site_id][s.index()].sum() for s in blk.slices))
    return out


def first_order_block_importance(accumulator: ImportanceAccumulator, block_partition: BlockPartition | None = None) -> dict[str, float]:
    """Block importance ``|sum (dL/dw) * w|`` accumulated over the evaluated batches."""
    if accumulator.step_count == 0:
        raise StateError("importance accumulator is empty")
    ids = [b.block_id for b in block_partition.blocks] if block_partition is not None else list(accumulator.scores)
    if accumulator.abs_order == "inside":
        return {bid: accumulator.scores.get(bid, 0.0) for bid in ids}
    return {bid: abs(accumulator.scores.get(bid, 0.0)) for bid in ids}


@torch.no_grad()
def movement_update(
    site: MaskedLinear,
    upstream_gradient: torch.Tensor,
    learning_rate_s: float,
    regularizer_weight: float = 0.0,
) -> torch.Tensor:
    """Accumulate the movement score ``S += lr_s * (-(dL/dw) * w)`` in place.

    ``upstream_gradient`` is the gradient with respect to the masked weight, so
    entries whose mask is 0 still move. A positive ``regularizer_weight`` also
    descends ``regularizer_weight * sum(sigmoid(S))``, pushing scores down.
    """
    if upstream_gradient.shape != site.score.shape:
        raise StateError(f"gradient shape {tuple(upstream_gradient.shape)} != score shape {tuple(site.score.shape)}")
    step = -(upstream_gradient * site.weight.detach())
    if regularizer_weight:
        sig = torch.sigmoid(site.score)
        step = step - regularizer_weight * sig * (1 - sig)
    site.score.add_(step.to(site.score.dtype), alpha=learning_rate_s)
    return site.score


def magnitude_scores(site: MaskedLinear | torch.Tensor) -> torch.Tensor:
    w = site.weight if isinstance(site, MaskedLinear) else site
    return w.detach().abs()


def keep_count(count: int, target_sparsity: float) -> int:
    """``floor((1 - r/100) * count)`` evaluated exactly on the decimal value of ``r``."""
    r = Fraction(str(float(target_sparsity)))
    return int((Fraction(100) - r) * count // 100)


def topk_mask(scores: torch.Tensor, target_sparsity: float) -> torch.Tensor:
    """Binary mask keeping the highest scores; ties keep the lower index."""
    if not 0 <= target_sparsity < 100:
        raise ConfigError(f"sparsity must be in [0, 100), got {target_sparsity}", "target_sparsity")
    flat = scores.detach().reshape(-1)
    k = keep_count(flat.numel(), target_sparsity)
    mask = torch.zeros(flat.numel(), dtype=scores.dtype)
    if k:
        order = torch.sort(flat, descending=True, stable=True).indices
        mask[order[:k]] = 1
    return mask.view_as(scores)


def global_topk_masks(scores: Mapping[str, torch.Tensor], target_sparsity: float) -> dict[str, torch.Tensor]:
    """Top-K over the concatenation of all sites."""
    names = list(scores)
    flat = torch.cat([scores[n].detach().reshape(-1) for n in names])
    mask = topk_mask(flat, target_sparsity)
    out, offset = {}, 0
    for n in names:
        size = scores[n].numel()
        out[n] = mask[offset : offset + size].view_as(scores[n]).to(scores[n].dtype)
        offset += size
    return out


def threshold_mask(
    scores: torch.Tensor, threshold: float, regularizer_weight: float = 0.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep entries with score above ``threshold``; return the sigmoid-sum regularizer too."""
    if regularizer_weight < 0:
        raise ConfigError("must be >= 0", "pruning.regularizer_weight")
    mask = (scores.detach() > threshold).to(scores.dtype)
    if mask.numel() and not bool(mask.any()):
        warnings.warn("threshold mask prunes every entry", DegenerateMaskWarning, stacklevel=2)
    if regularizer_weight == 0:
        reg = scores.new_zeros(())
    else:
        reg = regularizer_weight * torch.sigmoid(scores.detach()).sum()
    return mask, reg


def structured_prune_step(
    block_importances: Mapping[str, float],
    currently_alive_blocks: Iterable[str],
    fraction: float,
    partition: BlockPartition,
    census: int | None = None,
    keep_last_head: bool = True,
) -> set[str]:
    """Choose alive blocks to remove, lowest importance first.

    Blocks are visited in ascending importance (ties in partition order) and
    taken while their cumulative entry count stays at or below
    ``fraction * census``. A block that would overshoot is taken only when the
    overshoot is smaller than the remaining shortfall, which ends the step;
    otherwise it is skipped so a smaller block can fill the gap. With
    ``keep_last_head`` the final alive head of a layer is never chosen.
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}", "fraction")
    alive = set(currently_alive_blocks)
    if not alive:
        raise StateError("no alive blocks")
    if census is None:
        census = sum(partition.sizes.values())
    target = fraction * census
    blocks = partition.by_id()
    order = {b.block_id: i for i, b in enumerate(partition.blocks)}
    heads_alive: dict[int, int] = defaultdict(int)
    for bid in alive:
        if blocks[bid].granularity == "head":
            heads_alive[blocks[bid].layer] += 1

    chosen: set[str] = set()
    cum = 0
    for bid in sorted(alive, key=lambda b: (block_importances[b], order[b])):
        blk = blocks[bid]
        if keep_last_head and blk.granularity == "head" and heads_alive[blk.layer] <= 1:
            continue
        size = partition.sizes[bid]
        overshoot = cum + size - target
        if overshoot > 0 and overshoot >= target - cum:
            continue
        chosen.add(bid)
        cum += size
        if blk.granularity == "head":
            heads_alive[blk.layer] -= 1
        if cum >= target:
            break
    if not chosen:
        raise StateError("no block can be removed for the requested fraction")
    return chosen
