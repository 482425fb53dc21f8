import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

from capprune.config import parse_config  # noqa: E402

TINY = {
    "model": {"vocab_size": 200, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ffn": 32, "max_seq_len": 32, "dropout": 0.0},
    "data": {"family": "keyword", "n_examples": 96, "n_classes": 2},
    "schedule": {"warmup_epochs": 1, "ramp_epochs": 2, "cooldown_epochs": 1, "retrain_epochs": 1},
    "contrastive": {"bank_size": 32},
    "training": {"batch_size": 16, "pretrain_steps": 10, "finetune_epochs": 1, "eval_every": 5},
}


def tiny_config(tmp_path, **top):
    import copy

    doc = copy.deepcopy(TINY)
    doc["output_dir"] = str(tmp_path / "run")
    for k, v in top.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    return parse_config(doc)


@pytest.fixture
def tiny(tmp_path):
    return lambda **top: tiny_config(tmp_path, **top)


@pytest.fixture(scope="session")
def tiny_teachers(tmp_path_factory):
    from capprune.orchestrator import load_task, prepare_teachers

    cfg = tiny_config(tmp_path_factory.mktemp("teachers"))
    train, dev = load_task(cfg)
    pre, fine = prepare_teachers(cfg, train)
    return cfg, (train, dev), (pre, fine)


# criterion number -> list of (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        results = ACCEPTANCE[n]
        ok = all(r for r, _ in results)
        failed = [d for r, d in results if not r]
        detail = "; ".join(failed) if failed else "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
