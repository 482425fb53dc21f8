"""Metrics, sparsity measurement, linear probing and the ablation runner."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import TaskData
from .errors import InputError, InvariantViolation
from .model import EncoderClassifier, state_digest

log = logging.getLogger(__name__)

ABLATION_TOGGLES = ("-PrC", "-SnC", "-FiC", "-sup", "-unsup", "-KD")


# ---------------------------------------------------------------------------
# metrics


def classification_metrics(preds, labels, n_classes: int) -> dict[str, float]:
    """Accuracy, plus positive-class F1 when ``n_classes == 2``.

    F1 is 1.0 when the positive class is absent from both predictions and
    labels, and 0.0 when it is absent from only one of them.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("empty dataset")
    out = {"accuracy": float((preds == labels).mean())}
    if n_classes == 2:
        tp = int(((preds == 1) & (labels == 1)).sum())
        pp = int((preds == 1).sum())
        ap = int((labels == 1).sum())
        if pp == 0 and ap == 0:
            f1 = 1.0
        elif pp == 0 or ap == 0:
            f1 = 0.0
        else:
            f1 = 2 * tp / (pp + ap)
        out["f1"] = float(f1)
    return out


@torch.no_grad()
def predict(model: EncoderClassifier, data: TaskData, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        preds = [model(b.input_ids, b.attention_mask)[0].argmax(-1).numpy() for b in data.iter_batches(batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(preds)


def evaluate(model: EncoderClassifier, dataset: TaskData) -> dict[str, float]:
    if len(dataset) == 0:
        raise InputError("empty dataset")
    if dataset.n_classes != model.config.n_classes:
        raise InputError(f"dataset has {dataset.n_classes} classes, model has {model.config.n_classes}")
    return classification_metrics(predict(model, dataset), dataset.labels, dataset.n_classes)


def primary_score(metrics: dict[str, float]) -> float:
    """F1 for binary tasks, accuracy otherwise."""
    return metrics.get("f1", metrics["accuracy"])


def measured_sparsity(model: EncoderClassifier) -> dict:
    """Percent of prunable entries whose mask is 0, globally and per site."""
    per_site = {}
    zeros = total = 0
    for sid, site in model.sites().items():
        z = int((site.mask == 0).sum())
        n = site.mask.numel()
        per_site[sid] = {"zeros": z, "count": n, "sparsity": 100.0 * z / n}
        zeros += z
        total += n
    return {
        "global": 100.0 * zeros / total if total else 0.0,
        "zeros": zeros,
        "census": total,
        "per_site": per_site,
    }


# ---------------------------------------------------------------------------
# probing


@dataclass
class ProbeResult:
    source_task: str
    target_task: str
    sparsity: float
    method: str
    score: float
    baseline_score: float = 0.0

    @property
    def delta(self) -> float:
        return self.score - self.baseline_score


@torch.no_grad()
def pooled_features(model: EncoderClassifier, data: TaskData, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        feats = [model.encode(b.input_ids, b.attention_mask)[1] for b in data.iter_batches(batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(feats)


def encoder_digest(model: EncoderClassifier) -> str:
    return state_digest(model, include_head=False)


def probe_transfer(
    pruned_model: EncoderClassifier,
    target_train: TaskData,
    target_dev: TaskData,
    probe_epochs: int = 10,
    lr: float = 1e-2,
    *,
    source_task: str = "",
    method: str = "",
    sparsity: float | None = None,
    baseline_score: float = 0.0,
    seed: int = 0,
) -> ProbeResult:
    """Fit a linear classifier on frozen pooled representations.

    Training is full-batch Adam on the target train split; the weights start
    at zero, so with ``probe_epochs=0`` every example gets class 0. The encoder
    (weights, scores and masks) is checksummed before and after.
    """
    before = encoder_digest(pruned_model)
    x_train = pooled_features(pruned_model, target_train)
    x_dev = pooled_features(pruned_model, target_dev)
    y_train = torch.as_tensor(target_train.labels)
    torch.manual_seed(seed)
    head = nn.Linear(x_train.shape[1], target_train.n_classes)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(probe_epochs):
        opt.zero_grad()
        F.cross_entropy(head(x_train), y_train).backward()
        opt.step()
    with torch.no_grad():
        preds = head(x_dev).argmax(-1).numpy()
    metrics = classification_metrics(preds, target_dev.labels, target_dev.n_classes)
    if encoder_digest(pruned_model) != before:
        raise InvariantViolation("encoder changed during probing")
    if sparsity is None:
        sparsity = measured_sparsity(pruned_model)["global"]
    return ProbeResult(source_task, target_train.name, float(sparsity), method, primary_score(metrics), baseline_score)


def probe_matrix(
    models: dict[str, dict[str, EncoderClassifier]],
    targets: dict[str, tuple[TaskData, TaskData]],
    baseline_of: dict[str, str],
    probe_epochs: int = 10,
    seed: int = 0,
) -> list[ProbeResult]:
    """Source x target transfer grid.

    ``models[source][method]`` is a pruned model; for every method that has an
    entry in ``baseline_of`` the delta is taken against its baseline method's
    probe on the same source and target.
    """
    results = []
    for source, by_method in models.items():
        for target, (tr, dv) in targets.items():
            scores = {}
            for method, model in by_method.items():
                scores[method] = probe_transfer(
                    model, tr, dv, probe_epochs, source_task=source, method=method, seed=seed
                )
            for method, res in scores.items():
                base = baseline_of.get(method)
                if base in scores:
                    res.baseline_score = scores[base].score
                else:
                    res.baseline_score = res.score
                results.append(res)
    return results


def write_probe_csv(results: Sequence[ProbeResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_task", "target_task", "sparsity", "method", "score", "baseline_score", "delta"])
        for r in results:
            w.writerow([r.source_task, r.target_task, f"{r.sparsity:.4f}", r.method, f"{r.score:.6f}", f"{r.baseline_score:.6f}", f"{r.delta:.6f}"])
    return path


# ---------------------------------------------------------------------------
# ablation


def apply_toggle(config, toggle: str):
    """Return a copy of ``config`` with one ablation toggle applied."""
    from .config import apply_overrides

    overrides = {
        "-PrC": {"loss.prc": 0.0},
        "-SnC": {"loss.snc": 0.0},
        "-FiC": {"loss.fic": 0.0},
        "-sup": {"contrastive.sup": False},
        "-unsup": {"contrastive.unsup": False},
        "-KD": {"loss.kd_weight": 0.0},
    }
    if toggle not in overrides:
        raise InputError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATION_TOGGLES}")
    return apply_overrides(config, overrides[toggle])


@dataclass
class AblationRow:
    variant: str
    task: str
    sparsity: float
    score: float
    metrics: dict
    teacher_digests: dict
    run_dir: str


@dataclass
class AblationTable:
    """Rows per (variant, task, sparsity). ``"full"`` is the unablated CAP run."""

    rows: list[AblationRow]
    sparsities: list[float]
    tasks: list[str]
    variants: list[str]

    def score(self, variant: str, task: str, sparsity: float) -> float:
        for r in self.rows:
            if (r.variant, r.task, r.sparsity) == (variant, task, sparsity):
                return r.score
        raise KeyError((variant, task, sparsity))

    def delta(self, variant: str, sparsity: float) -> float:
        """Mean over tasks of ``score(variant) - score(full)``."""
        diffs = [self.score(variant, t, sparsity) - self.score("full", t, sparsity) for t in self.tasks]
        return float(np.mean(diffs))

    def grid(self) -> list[dict]:
        """One dict per variant: per-(sparsity, task) scores plus a delta per sparsity."""
        out = []
        for v in self.variants:
            row: dict = {"variant": v}
            for s in self.sparsities:
                for t in self.tasks:
                    row[f"{t}@{s:g}"] = self.score(v, t, s)
                row[f"delta@{s:g}"] = self.delta(v, s)
            out.append(row)
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        grid = self.grid()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(grid[0]))
            w.writeheader()
            for row in grid:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return path


def run_ablation(
    base_config,
    toggles: Iterable[str],
    sparsities: Sequence[float] | None = None,
    tasks: Sequence[str] | None = None,
) -> AblationTable:
    """Run the full CAP configuration and one variant per toggle.

    Every (task, sparsity) cell shares one pair of teachers, built once per
    task, and all variants use ``base_config.seed``. Each run lives under
    ``<output_dir>/<task>/r<sparsity>/<variant>``. Runs execute sequentially.
    """
    from .config import apply_overrides
    from .orchestrator import load_task, prepare_teachers, run_cap

    toggles = list(toggles)
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise InputError(f"unknown ablation toggle {t!r}; expected one of {ABLATION_TOGGLES}")
    sparsities = [float(s) for s in (sparsities or [base_config.target_sparsity])]
    tasks = list(tasks or [base_config.data.family])
    root = Path(base_config.output_dir)
    variants = ["full", *toggles]
    rows: list[AblationRow] = []
    for task in tasks:
        task_cfg = apply_overrides(base_config, {"data.family": task}) if base_config.data.kind == "synthetic" else base_config
        train, dev = load_task(task_cfg)
        teacher_dir = apply_overrides(task_cfg, {"output_dir": str(root / task / "teachers")}).resolved_output_dir()
        pre, fine = prepare_teachers(task_cfg, train, teacher_dir)
        expected = {"pretrained": state_digest(pre), "finetuned": state_digest(fine)}
        for s in sparsities:
            for variant in variants:
                cfg = task_cfg if variant == "full" else apply_toggle(task_cfg, variant)
                cfg = apply_overrides(cfg, {"target_sparsity": s, "output_dir": str(root / task / f"r{s:g}" / variant)})
                art = run_cap(cfg, teachers=(pre, fine), data=(train, dev))
                if art.summary["teacher_digests"] != expected:
                    raise InvariantViolation(f"teachers differ for variant {variant!r}")
                rows.append(
                    AblationRow(variant, task, s, primary_score(art.summary["dev"]), art.summary["dev"], art.summary["teacher_digests"], str(art.run_dir))
                )
                log.info("ablation %s %s r=%g: %.4f", task, variant, s, rows[-1].score)
    return AblationTable(rows, sparsities, tasks, variants)


# ---------------------------------------------------------------------------
# report


def collect_summaries(root) -> list[dict]:
    """Every ``summary.json`` below ``root``, sorted by path."""
    out = []
    for path in sorted(Path(root).rglob("summary.json")):
        s = json.loads(path.read_text())
        s["run_dir"] = str(path.parent)
        out.append(s)
    return out


def report(root, out_dir=None) -> dict[str, Path]:
    """Write ``runs.csv``, ``summary.csv`` (seed mean and std) and ``score_vs_sparsity.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = collect_summaries(root)
    if not runs:
        raise InputError(f"no summary.json found under {root}")
    out_dir = Path(out_dir or root)
    out_dir.mkdir(parents=True, exist_ok=True)

    runs_csv = out_dir / "runs.csv"
    with open(runs_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_dir", "task", "method", "seed", "target_sparsity", "measured_sparsity", "score"])
        for s in runs:
            w.writerow([s["run_dir"], s["task"], s["method"], s["seed"], s["target_sparsity"], f"{s['measured_sparsity']:.4f}", f"{primary_score(s['dev']):.6f}"])

    groups: dict[tuple, list[float]] = {}
    for s in runs:
        groups.setdefault((s["task"], s["method"], float(s["target_sparsity"])), []).append(primary_score(s["dev"]))
    summary_csv = out_dir / "summary.csv"
    with open(summary_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "target_sparsity", "n_seeds", "mean", "std"])
        for (task, method, r), scores in sorted(groups.items()):
            w.writerow([task, method, r, len(scores), f"{np.mean(scores):.6f}", f"{np.std(scores):.6f}"])

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({m for _, m, _ in groups}):
        pts = sorted((r, np.mean(v)) for (_, m, r), v in groups.items() if m == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("sparsity (%)")
    ax.set_ylabel("dev score")
    ax.legend()
    ax.grid(alpha=0.3)
    plot = out_dir / "score_vs_sparsity.png"
    fig.tight_layout()
    fig.savefig(plot, dpi=100)
    plt.close(fig)
    return {"runs": runs_csv, "summary": summary_csv, "plot": plot}
