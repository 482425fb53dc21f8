"""Small post-LN transformer encoder classifier with maskable encoder weights."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3
MASK_ID = 4
N_SPECIAL = 5

ROLES = ("pretrained", "finetuned", "snapshot", "pruned")


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 32
    n_classes: int = 2
    pooling: str = "cls"
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads", "model.n_heads")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}", "model.pooling")
        for name in ("vocab_size", "d_model", "d_ffn", "max_seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", f"model.{name}")
        if self.n_layers < 0:
            raise ConfigError("must be non-negative", "model.n_layers")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must be in [0, 1)", "model.dropout")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class MaskedLinear(nn.Linear):
    """Linear layer whose forward pass uses ``weight * mask``.

    ``score`` holds the pruning importance for every weight entry and ``mask``
    the current binary keep-mask. Both are buffers: they are serialized with the
    model but never touched by the optimizer.

    When ``track_grad`` is set, the gradient with respect to the masked product
    is stored in ``masked_grad`` after each backward pass. Treating the mask as
    identity, this is the upstream gradient used by movement scoring, and it is
    nonzero even where the mask is zero.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.register_buffer("mask", torch.ones_like(self.weight))
        self.register_buffer("score", torch.zeros_like(self.weight))
        self.prunable = True
        self.site_id = ""
        self.track_grad = False
        self.masked_grad: torch.Tensor | None = None

    def masked_weight(self) -> torch.Tensor:
        return self.weight * self.mask

    def _store_grad(self, grad: torch.Tensor) -> None:
        if self.masked_grad is None:
            self.masked_grad = grad.detach().clone()
        else:
            self.masked_grad += grad.detach()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.masked_weight()
        if self.track_grad and w.requires_grad:
            w.register_hook(self._store_grad)
        return F.linear(x, w, self.bias)


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.q = MaskedLinear(cfg.d_model, cfg.d_model)
        self.k = MaskedLinear(cfg.d_model, cfg.d_model)
        self.v = MaskedLinear(cfg.d_model, cfg.d_model)
        self.o = MaskedLinear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape

        def split(t):
            return t.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        att = att.masked_fill(~key_padding[:, None, None, :], float("-inf"))
        att = self.drop(att.softmax(dim=-1))
        ctx = (att @ v).transpose(1, 2).reshape(b, n, -1)
        return self.o(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = SelfAttention(cfg)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ffn_in = MaskedLinear(cfg.d_model, cfg.d_ffn)
        self.ffn_out = MaskedLinear(cfg.d_ffn, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor) -> torch.Tensor:
        x = self.ln1(x + self.drop(self.attn(x, key_padding)))
        h = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ln2(x + self.drop(h))


class EncoderClassifier(nn.Module):
    """Token + position embeddings, ``n_layers`` encoder layers, pooled linear head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.emb_ln = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.classifier = nn.Linear(cfg.d_model, cfg.n_classes)
        self.apply(_init_weights)
        for name, site in self.named_sites():
            site.site_id = name

    def named_sites(self) -> Iterator[tuple[str, MaskedLinear]]:
        for name, module in self.named_modules():
            if isinstance(module, MaskedLinear) and module.prunable:
                yield name, module

    def sites(self) -> dict[str, MaskedLinear]:
        return dict(self.named_sites())

    def hidden_states(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if input_ids.numel() and (input_ids.min() < 0 or input_ids.max() >= self.config.vocab_size):
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        if input_ids.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence length {input_ids.shape[1]} exceeds max_seq_len")
        pos = torch.arange(input_ids.shape[1], device=input_ids.device)
        x = self.drop(self.emb_ln(self.tok_emb(input_ids) + self.pos_emb(pos)[None]))
        key_padding = attention_mask.bool()
        for layer in self.layers:
            x = layer(x, key_padding)
        return x

    def pool(self, hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if self.config.pooling == "cls":
            return hidden[:, 0]
        m = attention_mask.to(hidden.dtype).unsqueeze(-1)
        return (hidden * m).sum(1) / m.sum(1).clamp_min(1.0)

    def encode(self, input_ids, attention_mask) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(hidden_states, pooled)`` with pooled of shape ``(batch, d_model)``."""
        hidden = self.hidden_states(input_ids, attention_mask)
        return hidden, self.pool(hidden, attention_mask)

    def forward(self, input_ids, attention_mask) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logits, pooled)``."""
        _, pooled = self.encode(input_ids, attention_mask)
        return self.classifier(pooled), pooled

    def track_masked_grads(self, enabled: bool = True) -> None:
        for site in self.sites().values():
            site.track_grad = enabled
            site.masked_grad = None

    def clear_masked_grads(self) -> None:
        for site in self.sites().values():
            site.masked_grad = None


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)
        if module.padding_idx is not None:
            with torch.no_grad():
                module.weight[module.padding_idx].zero_()


def encode(model: EncoderClassifier, batch) -> tuple[torch.Tensor, torch.Tensor]:
    return model.encode(batch.input_ids, batch.attention_mask)


def prunable_census(model: EncoderClassifier) -> int:
    """Number of prunable encoder weight entries. Biases, embeddings, norms and the head are excluded."""
    return sum(site.weight.numel() for site in model.sites().values())


# ---------------------------------------------------------------------------
# structured blocks


@dataclass(frozen=True)
class BlockSlice:
    site_id: str
    axis: int  # 0 = output rows, 1 = input columns
    start: int
    stop: int

    def size(self, site: MaskedLinear) -> int:
        other = site.weight.shape[1 - self.axis]
        return (self.stop - self.start) * other

    def index(self) -> tuple:
        s = slice(self.start, self.stop)
        return (s, slice(None)) if self.axis == 0 else (slice(None), s)


@dataclass(frozen=True)
class Block:
    block_id: str
    granularity: str  # "head" or "ffn_neuron"
    layer: int
    unit: int
    slices: tuple[BlockSlice, ...]


@dataclass
class BlockPartition:
    blocks: list[Block]
    sizes: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.blocks)

    def by_id(self) -> dict[str, Block]:
        return {b.block_id: b for b in self.blocks}

    def heads(self) -> list[Block]:
        return [b for b in self.blocks if b.granularity == "head"]

    def neurons(self) -> list[Block]:
        return [b for b in self.blocks if b.granularity == "ffn_neuron"]


def block_partition(model: EncoderClassifier) -> BlockPartition:
    """One block per attention head (Q/K/V rows, O columns) and per FFN neuron (in row, out column)."""
    cfg = model.config
    blocks = []
    sizes = {}
    sites = model.sites()
    for li in range(cfg.n_layers):
        p = f"layers.{li}"
        for h in range(cfg.n_heads):
            a, b = h * cfg.d_head, (h + 1) * cfg.d_head
            slices = tuple(BlockSlice(f"{p}.attn.{n}", 0, a, b) for n in "qkv")
            slices += (BlockSlice(f"{p}.attn.o", 1, a, b),)
            blocks.append(Block(f"L{li}.head{h}", "head", li, h, slices))
        for j in range(cfg.d_ffn):
            slices = (BlockSlice(f"{p}.ffn_in", 0, j, j + 1), BlockSlice(f"{p}.ffn_out", 1, j, j + 1))
            blocks.append(Block(f"L{li}.ffn{j}", "ffn_neuron", li, j, slices))
    for blk in blocks:
        sizes[blk.block_id] = sum(s.size(sites[s.site_id]) for s in blk.slices)
    return BlockPartition(blocks, sizes)


@torch.no_grad()
def set_block_mask(model: EncoderClassifier, block: Block, value: float = 0.0) -> None:
    sites = model.sites()
    for s in block.slices:
        sites[s.site_id].mask[s.index()] = value


@torch.no_grad()
def block_alive(model: EncoderClassifier, block: Block) -> bool:
    sites = model.sites()
    return any(bool(sites[s.site_id].mask[s.index()].any()) for s in block.slices)


# ---------------------------------------------------------------------------
# freezing, hashing, checkpoints


def frozen_copy(model: EncoderClassifier) -> EncoderClassifier:
    """Deep copy in eval mode with gradients disabled."""
    twin = copy.deepcopy(model)
    twin.eval()
    twin.track_masked_grads(False)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def state_digest(model: nn.Module, include_head: bool = True) -> str:
    """SHA-256 over every parameter and buffer (weights, scores, masks)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        if not include_head and name.startswith("classifier."):
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    model: EncoderClassifier,
    path: str | Path,
    *,
    role: str,
    step: int = 0,
    sparsity: float = 0.0,
    extra: dict | None = None,
) -> Path:
    """Write ``meta.json`` plus ``tensors.pt`` (weights, scores, masks) into directory ``path``."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": asdict(model.config),
        "step": step,
        "sparsity": sparsity,
        "role": role,
        "digest": state_digest(model),
    }
    if extra:
        meta.update(extra)
    torch.save(model.state_dict(), path / "tensors.pt")
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[EncoderClassifier, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    model = EncoderClassifier(ModelConfig(**meta["config"]))
    model.load_state_dict(torch.load(path / "tensors.pt", weights_only=True))
    return model, meta
