"""Teacher preparation and the prune-and-train loop.

A run fine-tunes (or loads) the dense teacher, pre-encodes banks for the
pre-trained and fine-tuned models, then prunes a student step by step while
training it on cross-entropy plus the enabled contrastive terms. Snapshots of
the student are frozen at schedule points, encoded into banks, and used as
extra contrast sets once the student has moved past their sparsity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import pruners
from .bank import RepresentationBank, encode_bank, fetch, load_bank, save_bank
from .config import LossWeights, RunConfig, config_to_dict, write_resolved
from .contrastive import ContrastiveConfig, ContrastSet, module_loss
from .data import TaskData, generate_synthetic_task, load_tsv_dataset, pretraining_corpus
from .errors import ConfigError, InvariantViolation, RunError, StateError
from .evalprobe import evaluate, measured_sparsity
from .model import (
    MASK_ID,
    N_SPECIAL,
    PAD_ID,
    EncoderClassifier,
    ModelConfig,
    block_alive,
    block_partition,
    frozen_copy,
    load_checkpoint,
    prunable_census,
    save_checkpoint,
    set_block_mask,
    state_digest,
)
from .runlog import MetricsLog
from .schedule import SparsitySchedule, milestone_schedule, snapshot_points

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))``, averaged over the batch."""
    t = temperature
    log_p = F.log_softmax(student_logits / t, dim=-1)
    log_q = F.log_softmax(teacher_logits / t, dim=-1)
    return F.kl_div(log_p, log_q, reduction="batchmean", log_target=True) * (t * t)


@dataclass
class FetchedBanks:
    """Contrast sets for one step. ``snc`` holds one set per eligible snapshot."""

    prc: ContrastSet | None = None
    fic: ContrastSet | None = None
    snc: list[ContrastSet] = field(default_factory=list)


def total_loss(
    batch,
    model: EncoderClassifier,
    banks: FetchedBanks | None,
    weights: LossWeights,
    contrastive: ContrastiveConfig,
    current_sparsity: float = 0.0,
    teacher: EncoderClassifier | None = None,
    regularizer: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted objective and its unweighted terms.

    ``ce*CE + prc*PrC + snc*SnC + fic*FiC + kd_weight*KD + regularizer``. A
    term whose weight is zero is not evaluated and contributes exactly 0.
    """
    logits, pooled = model(batch.input_ids, batch.attention_mask)
    terms: dict[str, torch.Tensor] = {"ce": F.cross_entropy(logits, batch.labels)}
    idx = batch.example_index.numpy()
    labels = batch.labels.numpy()
    banks = banks or FetchedBanks()
    if weights.prc and banks.prc is not None:
        terms["prc"] = module_loss("prc", pooled, idx, labels, banks.prc, contrastive)
    if weights.snc and banks.snc:
        terms["snc"] = module_loss("snc", pooled, idx, labels, banks.snc, contrastive, current_sparsity)
    if weights.fic and banks.fic is not None:
        terms["fic"] = module_loss("fic", pooled, idx, labels, banks.fic, contrastive)
    if weights.kd_weight and teacher is not None:
        with torch.no_grad():
            teacher_logits, _ = teacher(batch.input_ids, batch.attention_mask)
        terms["kd"] = kd_loss(logits, teacher_logits, weights.kd_temperature)
    if regularizer is not None:
        terms["reg"] = regularizer

    scale = {"ce": weights.ce, "prc": weights.prc, "snc": weights.snc, "fic": weights.fic, "kd": weights.kd_weight, "reg": 1.0}
    total = logits.new_zeros(())
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise RunError(f"loss term {name!r} is not finite ({value.item()})", term=name)
        total = total + scale[name] * value
    return total, {k: v.item() for k, v in terms.items()}


# ---------------------------------------------------------------------------
# teachers


def pretrain_masked_lm(
    cfg: ModelConfig,
    corpus: list[np.ndarray],
    steps: int,
    *,
    lr: float = 1e-3,
    batch_size: int = 64,
    mask_prob: float = 0.15,
    seed: int = 0,
) -> EncoderClassifier:
    """Short masked-token-prediction pass producing the dense starting model."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = EncoderClassifier(cfg)
    lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
    opt = torch.optim.AdamW(list(model.parameters()) + list(lm_head.parameters()), lr=lr, weight_decay=0.01)
    data = TaskData("pretrain", corpus, np.zeros(len(corpus), dtype=np.int64), 2)
    model.train()
    for step in range(steps):
        batch = data.batch(rng.choice(len(data), size=min(batch_size, len(data)), replace=False))
        ids = batch.input_ids.clone()
        maskable = ids >= N_SPECIAL
        chosen = maskable & torch.from_numpy(rng.random(ids.shape) < mask_prob)
        if not bool(chosen.any()):
            continue
        targets = ids[chosen]
        ids[chosen] = MASK_ID
        hidden = model.hidden_states(ids, batch.attention_mask)
        loss = F.cross_entropy(lm_head(hidden[chosen]), targets)
        if not math.isfinite(loss.item()):
            raise RunError("pre-training loss diverged", term="mlm")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return frozen_copy(model)


def _reset_head(model: EncoderClassifier, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.classifier.weight.normal_(0.0, 0.02, generator=gen)
        model.classifier.bias.zero_()


def _steps(epochs: float, steps_per_epoch: int) -> int:
    return int(round(epochs * steps_per_epoch))


def fine_tune_dense(
    pretrained_model: EncoderClassifier,
    task_data: TaskData,
    epochs: float,
    *,
    lr: float = 5e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> EncoderClassifier:
    """Fine-tune a copy of ``pretrained_model`` (fresh head) and return it frozen.

    ``pretrained_model`` itself is never modified.
    """
    before = state_digest(pretrained_model)
    model = copy.deepcopy(pretrained_model)
    for p in model.parameters():
        p.requires_grad_(True)
    _reset_head(model, seed + 17)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 3])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n_steps = _steps(epochs, math.ceil(len(task_data) / batch_size))
    model.train()
    step = 0
    while step < n_steps:
        for batch in task_data.iter_batches(batch_size, rng):
            if step >= n_steps:
                break
            logits, _ = model(batch.input_ids, batch.attention_mask)
            loss = F.cross_entropy(logits, batch.labels)
            if not math.isfinite(loss.item()):
                raise RunError("fine-tuning loss diverged", term="ce")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    if state_digest(pretrained_model) != before:
        raise InvariantViolation("pre-trained model changed during fine-tuning")
    return frozen_copy(model)


def load_task(config: RunConfig) -> tuple[TaskData, TaskData]:
    d = config.data
    if d.kind == "tsv":
        train, dev = load_tsv_dataset(d.train_path, d.dev_path, config.model.max_seq_len)
        if len(train.vocab) > config.model.vocab_size:
            raise ConfigError(f"data vocabulary ({len(train.vocab)}) exceeds model.vocab_size", "model.vocab_size")
    else:
        seed = config.seed if d.seed is None else d.seed
        train, dev = generate_synthetic_task(d.family, d.n_examples, d.n_classes, seed, vocab_size=config.model.vocab_size)
    if train.n_classes != config.model.n_classes:
        raise ConfigError(f"data has {train.n_classes} classes, model.n_classes is {config.model.n_classes}", "model.n_classes")
    return train, dev


def prepare_teachers(config: RunConfig, train: TaskData, out_dir=None) -> tuple[EncoderClassifier, EncoderClassifier]:
    """Load or build ``(pretrained, finetuned)``; both are returned frozen."""
    t = config.training
    if config.teachers.pretrained_path:
        pre, _ = load_checkpoint(config.teachers.pretrained_path)
        if pre.config != config.model:
            raise ConfigError("pre-trained checkpoint config differs from model config", "teachers.pretrained_path")
        pre = frozen_copy(pre)
    else:
        corpus = pretraining_corpus(max(3000, len(train)), config.seed, config.model.vocab_size)
        pre = pretrain_masked_lm(config.model, corpus, t.pretrain_steps, lr=t.pretrain_lr, seed=config.seed)
    if config.teachers.finetuned_path:
        fine, _ = load_checkpoint(config.teachers.finetuned_path)
        fine = frozen_copy(fine)
    else:
        fine = fine_tune_dense(pre, train, t.finetune_epochs, lr=t.lr, batch_size=t.batch_size, seed=config.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        if not config.teachers.pretrained_path:
            save_checkpoint(pre, out_dir / "pretrained", role="pretrained")
        if not config.teachers.finetuned_path:
            save_checkpoint(fine, out_dir / "finetuned", role="finetuned")
    return pre, fine


# ---------------------------------------------------------------------------
# snapshot registry


@dataclass
class SnapshotEntry:
    sparsity: float  # schedule target at capture time
    step: int
    checkpoint: str | None
    bank_path: str | None
    bank: RepresentationBank = field(repr=False, default=None)
    measured_sparsity: float | None = None


class SnapshotRegistry:
    """Snapshots in capture order; sparsities strictly increase."""

    def __init__(self):
        self.entries: list[SnapshotEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def sparsities(self) -> list[float]:
        return [e.sparsity for e in self.entries]

    def register(self, entry: SnapshotEntry) -> None:
        if entry.bank is None:
            raise StateError("a snapshot must carry an encoded bank")
        if self.entries and not entry.sparsity > self.entries[-1].sparsity:
            raise StateError(
                f"snapshot sparsity {entry.sparsity} does not exceed previous {self.entries[-1].sparsity}"
            )
        self.entries.append(entry)

    def below(self, sparsity: float) -> list[SnapshotEntry]:
        return [e for e in self.entries if e.sparsity < sparsity]

    def manifest(self) -> list[dict]:
        return [
            {
                "sparsity": e.sparsity,
                "measured_sparsity": e.measured_sparsity,
                "step": e.step,
                "checkpoint": e.checkpoint,
                "bank": e.bank_path,
            }
            for e in self.entries
        ]


# ---------------------------------------------------------------------------
# the run


@dataclass
class RunArtifacts:
    run_dir: Path
    model: EncoderClassifier
    final_checkpoint: Path
    registry: SnapshotRegistry
    metrics_path: Path
    summary: dict
    mask_digests: list[str]


def mask_digest(model: EncoderClassifier) -> str:
    h = hashlib.sha1()
    for sid, site in model.sites().items():
        h.update(sid.encode())
        h.update(np.packbits(site.mask.numpy().astype(bool)).tobytes())
    return h.hexdigest()


def build_schedule(config: RunConfig, steps_per_epoch: int) -> SparsitySchedule:
    s = config.schedule
    if config.schedule_kind == "milestones":
        warm = _steps(s.warmup_epochs, steps_per_epoch)
        retrain = max(1, _steps(s.retrain_epochs, steps_per_epoch))
        levels = milestone_schedule(config.target_sparsity, s.step_fraction)
        return SparsitySchedule("milestones", milestones=[(warm + k * retrain, r) for k, r in enumerate(levels)])
    warm = _steps(s.warmup_epochs, steps_per_epoch)
    ramp = max(1, _steps(s.ramp_epochs, steps_per_epoch))
    return SparsitySchedule(
        "cubic",
        initial_sparsity=s.initial_sparsity,
        final_sparsity=config.target_sparsity,
        warmup_end=warm,
        ramp_end=warm + ramp,
        cooldown_steps=_steps(s.cooldown_epochs, steps_per_epoch),
    )


class _Trainer:
    """Mutable state of one pruning run."""

    def __init__(self, config: RunConfig, train: TaskData, dev: TaskData, pre, fine, run_dir: Path, metrics: MetricsLog):
        self.cfg = config
        self.steps_per_epoch = math.ceil(len(train) / config.training.batch_size)
        self.train = train
        self.dev = dev
        self.pre = pre
        self.fine = fine
        self.run_dir = run_dir
        self.metrics = metrics
        self.weights = config.effective_loss()
        self.ccfg = config.contrastive
        t = config.training

        torch.manual_seed(config.seed + 101)
        source = fine if t.student_init == "finetuned" else pre
        self.model = copy.deepcopy(source)
        for p in self.model.parameters():
            p.requires_grad_(True)
        if t.student_init == "pretrained":
            _reset_head(self.model, config.seed + 17)
        self.model.train()
        self.criterion = config.criterion
        if self.criterion in ("movement", "soft_movement"):
            self.model.track_masked_grads(True)
            for site in self.model.sites().values():
                site.score.zero_()
        self.opt = torch.optim.Adam(self.model.parameters(), lr=t.lr)
        self.census = prunable_census(self.model)
        self.batch_rng = np.random.default_rng([config.seed, 1])
        self.fetch_rng = np.random.default_rng([config.seed, 2])
        self._batches = iter(())
        self.step = 0
        self.target = 0.0  # schedule sparsity currently in force
        self.mask_digests: list[str] = []
        self.registry = SnapshotRegistry()
        self._term_sums: dict[str, float] = {}
        self._term_count = 0

        # bank corpus: the whole training set, or a fixed subset
        n = len(train)
        if n > t.bank_corpus_limit:
            keep = np.sort(np.random.default_rng([config.seed, 4]).choice(n, t.bank_corpus_limit, replace=False))
        else:
            keep = np.arange(n)
        self.bank_ids = keep
        self.bank_corpus = train.subset(keep)
        self.banks: dict[str, RepresentationBank] = {}
        for role, model in (("pretrained", pre), ("finetuned", fine)):
            bank = encode_bank(model, self.bank_corpus, role, 0.0, 0, example_index=keep)
            save_bank(bank, run_dir / "banks" / f"{role}.bin")
            self.banks[role] = bank
        self._fixed: dict[int, ContrastSet] = {}

    # -- batches and banks --------------------------------------------------

    def next_batch(self):
        try:
            return next(self._batches)
        except StopIteration:
            self._batches = self.train.iter_batches(self.cfg.training.batch_size, self.batch_rng)
            return next(self._batches)

    def _fetch(self, bank: RepresentationBank, anchors) -> ContrastSet:
        if not self.ccfg.resample_each_step and id(bank) in self._fixed:
            return self._fixed[id(bank)]
        res = fetch(bank, self.ccfg.bank_size, self.fetch_rng, anchors if self.ccfg.unsup else None)
        cset = res.contrast_set()
        if not self.ccfg.resample_each_step:
            self._fixed[id(bank)] = cset
        return cset

    def fetched_banks(self, batch, current_sparsity: float) -> FetchedBanks:
        w, enabled = self.weights, set(self.ccfg.modules)
        out = FetchedBanks()
        if not (self.ccfg.sup or self.ccfg.unsup):
            return out
        anchors = batch.example_index.numpy()
        if w.prc and "prc" in enabled:
            out.prc = self._fetch(self.banks["pretrained"], anchors)
        if w.fic and "fic" in enabled:
            out.fic = self._fetch(self.banks["finetuned"], anchors)
        if w.snc and "snc" in enabled:
            out.snc = [self._fetch(e.bank, anchors) for e in self.registry.below(current_sparsity)]
        return out

    # -- one optimisation step ---------------------------------------------

    def current_sparsity(self) -> float:
        return measured_sparsity(self.model)["global"]

    def forward_backward(self, batch, regularizer=None):
        banks = self.fetched_banks(batch, self.target)
        try:
            loss, terms = total_loss(
                batch, self.model, banks, self.weights, self.ccfg, self.target,
                teacher=self.fine if self.weights.kd_weight else None,
                regularizer=regularizer,
            )
        except RunError as exc:
            self.metrics.emit({"event": "error", "step": self.step, "term": exc.term, "message": str(exc)}, flush=True)
            raise
        self.opt.zero_grad(set_to_none=True)
        self.model.clear_masked_grads()
        loss.backward()
        terms["total"] = loss.item()
        for k, v in terms.items():
            self._term_sums[k] = self._term_sums.get(k, 0.0) + v
        self._term_count += 1
        return terms

    def train_step(self, regularizer=None):
        self.forward_backward(self.next_batch(), regularizer)
        self.opt.step()
        self.step += 1

    # -- masks ----------------------------------------------------------------

    @torch.no_grad()
    def apply_unstructured_masks(self, target: float) -> None:
        sites = self.model.sites()
        if self.criterion == "soft_movement":
            for site in sites.values():
                mask, _ = pruners.threshold_mask(site.score, self.cfg.pruning.threshold)
                site.mask.copy_(mask)
        else:
            if self.criterion == "magnitude":
                scores = {sid: pruners.magnitude_scores(s) for sid, s in sites.items()}
            else:
                scores = {sid: s.score for sid, s in sites.items()}
            if self.cfg.pruning.topk_scope == "global":
                masks = pruners.global_topk_masks(scores, target)
            else:
                masks = {sid: pruners.topk_mask(sc, target) for sid, sc in scores.items()}
            for sid, site in sites.items():
                site.mask.copy_(masks[sid])
        self.mask_digests.append(mask_digest(self.model))

    def soft_regularizer(self) -> torch.Tensor | None:
        if self.criterion != "soft_movement" or not self.cfg.pruning.regularizer_weight:
            return None
        rw = self.cfg.pruning.regularizer_weight
        return sum(pruners.threshold_mask(s.score, self.cfg.pruning.threshold, rw)[1] for s in self.model.sites().values())

    def update_scores(self) -> None:
        if self.criterion not in ("movement", "soft_movement"):
            return
        rw = self.cfg.pruning.regularizer_weight if self.criterion == "soft_movement" else 0.0
        for site in self.model.sites().values():
            if site.masked_grad is not None:
                pruners.movement_update(site, site.masked_grad, self.cfg.pruning.score_lr, rw)

    # -- snapshots, evaluation ----------------------------------------------

    def capture_snapshot(self) -> None:
        sparsity = self.target
        if self.registry.entries and not sparsity > self.registry.entries[-1].sparsity:
            log.info("skipping snapshot at step %d: sparsity %.3f did not increase", self.step, sparsity)
            return
        frozen = frozen_copy(self.model)
        tag = f"r{sparsity:07.3f}"
        bank = encode_bank(frozen, self.bank_corpus, "snapshot", sparsity, self.step, example_index=self.bank_ids)
        bank_path = save_bank(bank, self.run_dir / "banks" / f"snapshot_{tag}.bin")
        ckpt = None
        if not self.cfg.training.drop_snapshot_weights:
            ckpt = str(save_checkpoint(frozen, self.run_dir / "snapshots" / tag, role="snapshot", step=self.step, sparsity=sparsity))
        measured = self.current_sparsity()
        self.registry.register(SnapshotEntry(sparsity, self.step, ckpt, str(bank_path), bank, measured))
        self.metrics.emit({"event": "snapshot", "step": self.step, "sparsity": measured, "target_sparsity": sparsity}, flush=True)

    def evaluate(self, target: float, event: str = "eval", flush: bool = False) -> dict:
        metrics = evaluate(self.model, self.dev)
        n = max(self._term_count, 1)
        record = {
            "event": event,
            "step": self.step,
            "sparsity": self.current_sparsity(),
            "target_sparsity": target,
            "losses": {k: v / n for k, v in sorted(self._term_sums.items())},
            "mask_digest": mask_digest(self.model),
            **metrics,
        }
        self._term_sums, self._term_count = {}, 0
        self.metrics.emit(record, flush=flush)
        return record

    # -- schedules ----------------------------------------------------------

    def run_cubic(self, schedule: SparsitySchedule) -> None:
        snaps = {t for t, _ in snapshot_points(schedule, self.cfg.schedule.crossings)}
        eval_every = self.cfg.training.eval_every
        soft = self.criterion == "soft_movement"
        for t in range(1, schedule.total_steps + 1):
            # soft movement keeps the dense mask until the warmup has built up scores
            thresholded = soft and t > schedule.warmup_end
            self.forward_backward(self.next_batch(), self.soft_regularizer() if thresholded else None)
            self.update_scores()
            self.opt.step()
            self.step += 1
            if thresholded or not soft:
                self.apply_unstructured_masks(schedule.sparsity_at(t))
            # soft-movement sparsity is whatever the threshold leaves, not a scheduled value
            self.target = self.current_sparsity() if soft else schedule.sparsity_at(t)
            if t in snaps:
                self.capture_snapshot()
            if t % eval_every == 0 or t == schedule.total_steps:
                self.evaluate(self.target, flush=t in snaps)

    def run_milestones(self, schedule: SparsitySchedule) -> None:
        partition = block_partition(self.model)
        steps = [s for s, _ in schedule.milestones]
        retrain = max(1, _steps(self.cfg.schedule.retrain_epochs, self.steps_per_epoch))
        eval_every = self.cfg.training.eval_every
        while self.step < steps[0]:
            self.train_step()
            if self.step % eval_every == 0:
                self.evaluate(0.0)
        for _, r in schedule.milestones:
            self.target = r
            self.prune_to(r, partition)
            self.mask_digests.append(mask_digest(self.model))
            self.evaluate(r, event="milestone", flush=True)
            for _ in range(retrain):
                self.train_step()
                if self.step % eval_every == 0:
                    self.evaluate(r)
            self.capture_snapshot()
            self.evaluate(r, event="milestone_end", flush=True)

    def prune_to(self, r: float, partition) -> None:
        pc = self.cfg.pruning
        acc = pruners.ImportanceAccumulator("first_order", pc.abs_order)
        # importance uses the full objective on fresh batches; no optimizer step
        for _ in range(pc.importance_batches):
            self.forward_backward(self.next_batch())
            acc.add(pruners.block_taylor_sums(self.model, partition))
        self.opt.zero_grad(set_to_none=True)
        importance = pruners.first_order_block_importance(acc, partition)
        alive = [b.block_id for b in partition.blocks if block_alive(self.model, b)]
        needed = r / 100.0 * self.census - measured_sparsity(self.model)["zeros"]
        if needed <= 0 or not alive:
            return
        try:
            removed = pruners.structured_prune_step(
                importance, alive, min(needed / self.census, 1 - 1e-12), partition, self.census, pc.keep_last_head
            )
        except StateError as exc:
            log.info("milestone %.1f%%: %s", r, exc)
            return
        blocks = partition.by_id()
        for bid in removed:
            set_block_mask(self.model, blocks[bid], 0.0)


def _validate(config: RunConfig) -> None:
    if config.criterion == "soft_movement" and config.schedule_kind != "cubic":
        raise ConfigError("soft movement needs a cubic schedule", "method")


def run_cap(config: RunConfig, *, teachers: tuple | None = None, data: tuple | None = None) -> RunArtifacts:
    """Fine-tune the teacher, then prune the student per ``config``.

    ``teachers`` and ``data`` let callers share pre-built ``(pre, fine)``
    models and ``(train, dev)`` splits across runs.
    """
    _validate(config)
    run_dir = config.resolved_output_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(config, run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    with MetricsLog(metrics_path) as metrics:
        train, dev = data if data is not None else load_task(config)
        if teachers is not None:
            pre, fine = teachers
        else:
            pre, fine = prepare_teachers(config, train, run_dir / "teachers")
        digests = {"pretrained": state_digest(pre), "finetuned": state_digest(fine)}
        fine_metrics = evaluate(fine, dev)
        metrics.emit({"event": "teacher", "role": "finetuned", "step": 0, **fine_metrics}, flush=True)

        trainer = _Trainer(config, train, dev, pre, fine, run_dir, metrics)
        schedule = build_schedule(config, trainer.steps_per_epoch)
        if schedule.kind == "milestones":
            trainer.run_milestones(schedule)
        else:
            trainer.run_cubic(schedule)

        after = {"pretrained": state_digest(pre), "finetuned": state_digest(fine)}
        if after != digests:
            raise InvariantViolation("a teacher model changed during pruning")
        final = trainer.evaluate(schedule.target, event="final", flush=True)

    model = trainer.model
    model.track_masked_grads(False)
    sp = measured_sparsity(model)
    final_ckpt = save_checkpoint(model, run_dir / "final", role="pruned", step=trainer.step, sparsity=sp["global"])
    (run_dir / "snapshots.json").write_text(json.dumps(trainer.registry.manifest(), indent=2))
    (run_dir / "mask_digests.json").write_text(json.dumps(trainer.mask_digests))
    summary = {
        "method": config.method,
        "seed": config.seed,
        "task": train.name,
        "target_sparsity": config.target_sparsity,
        "measured_sparsity": sp["global"],
        "zeros": sp["zeros"],
        "census": sp["census"],
        "steps": trainer.step,
        "schedule": schedule.as_dict(),
        "snapshots": trainer.registry.sparsities,
        "teacher_digests": digests,
        "finetuned_dev": fine_metrics,
        "dev": {k: final[k] for k in ("accuracy", "f1") if k in final},
        "config": config_to_dict(config),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return RunArtifacts(run_dir, model, final_ckpt, trainer.registry, metrics_path, summary, trainer.mask_digests)
