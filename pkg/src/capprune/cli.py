"""Command-line entry point.

Every leaf config key is also a flag (``--contrastive.temperature 0.2``);
flags override values from ``--config``. Relative output directories are
placed under ``$CAPPRUNE_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 2 configuration error, 1 run error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import RunConfig, apply_overrides, flat_keys, load_config, write_resolved
from .errors import ConfigError, InputError, InvariantViolation, RunError, StateError

log = logging.getLogger("capprune")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    group = p.add_argument_group("config keys")
    for key in flat_keys():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name, raw in vars(args).items():
        if name.startswith("cfg:") and raw is not None:
            key = name[4:]
            try:
                overrides[key] = yaml.safe_load(raw)
            except yaml.YAMLError:
                raise ConfigError(f"cannot parse value {raw!r}", key) from None
    return apply_overrides(cfg, overrides) if overrides else cfg


def _csv_list(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


# ---------------------------------------------------------------------------
# subcommands


def cmd_finetune(args) -> int:
    from .evalprobe import evaluate
    from .orchestrator import load_task, prepare_teachers

    cfg = _resolve_config(args)
    out = cfg.resolved_output_dir()
    write_resolved(cfg, out)
    train, dev = load_task(cfg)
    pre, fine = prepare_teachers(cfg, train, out / "teachers")
    result = {"pretrained": str(out / "teachers" / "pretrained"), "finetuned": str(out / "teachers" / "finetuned"), "dev": evaluate(fine, dev)}
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_prune(args) -> int:
    from .orchestrator import run_cap

    art = run_cap(_resolve_config(args))
    s = art.summary
    print(json.dumps({"run_dir": str(art.run_dir), "measured_sparsity": s["measured_sparsity"], "dev": s["dev"]}, indent=2))
    return EXIT_OK


def cmd_probe(args) -> int:
    from .config import BASELINE_OF
    from .data import generate_synthetic_task
    from .evalprobe import probe_matrix, write_probe_csv
    from .model import load_checkpoint

    cfg = _resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("at least one --checkpoint METHOD=PATH is required", "checkpoint")
    models = {}
    for item in args.checkpoint:
        method, _, path = item.rpartition("=")
        model, _ = load_checkpoint(path)
        models[method or Path(path).name] = model
    targets = {}
    for fam in _csv_list(args.targets) or ["keyword", "pair", "prefix"]:
        targets[fam] = generate_synthetic_task(fam, cfg.data.n_examples, 2, cfg.seed, vocab_size=cfg.model.vocab_size)
    results = probe_matrix({args.source: models}, targets, BASELINE_OF, args.probe_epochs, cfg.seed)
    path = write_probe_csv(results, cfg.resolved_output_dir() / "probe.csv")
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evalprobe import run_ablation

    cfg = _resolve_config(args)
    toggles = [t if t.startswith("-") else f"-{t}" for t in _csv_list(args.toggles)]
    sparsities = [float(s) for s in _csv_list(args.sparsities)] or None
    table = run_ablation(cfg, toggles, sparsities, _csv_list(args.tasks) or None)
    path = table.write_csv(cfg.resolved_output_dir() / "ablation.csv")
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evalprobe import report

    paths = report(args.root, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def cmd_sparsity_report(args) -> int:
    from .evalprobe import measured_sparsity
    from .model import load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    sp = measured_sparsity(model)
    out = {"checkpoint": args.checkpoint, "role": meta.get("role"), **sp}
    if not args.per_site:
        out.pop("per_site")
    print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capprune", description="Contrastive pruning for small transformer encoders")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="pre-train and fine-tune the dense teachers")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("prune", help="run one pruning job")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("probe", help="linear probes of pruned encoders on synthetic target tasks")
    _add_config_flags(p)
    p.add_argument("--checkpoint", action="append", metavar="METHOD=PATH", help="pruned checkpoint; repeatable")
    p.add_argument("--source", default="pair", help="name of the task the checkpoints were pruned on")
    p.add_argument("--targets", help="comma-separated target families")
    p.add_argument("--probe-epochs", type=int, default=10)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="toggle contrastive components off one at a time")
    _add_config_flags(p)
    p.add_argument("--toggles", default="PrC,SnC,FiC,sup,unsup", help="comma-separated, e.g. PrC,SnC,sup")
    p.add_argument("--sparsities", help="comma-separated targets; defaults to target_sparsity")
    p.add_argument("--tasks", help="comma-separated synthetic families")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="CSV tables and a score-vs-sparsity plot from stored runs")
    p.add_argument("root", help="directory searched for run summaries")
    p.add_argument("--out", help="output directory (default: root)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sparsity-report", help="measured sparsity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--per-site", action="store_true")
    p.set_defaults(func=cmd_sparsity_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, InputError, StateError, InvariantViolation, OSError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
