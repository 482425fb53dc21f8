"""End-to-end acceptance checks, one verdict line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are printed in the
"acceptance criteria" section of the terminal summary.
"""

import time

import numpy as np
import pytest
import torch

from capprune.bank import RepresentationBank, fetch, footprint, footprint_for
from capprune.config import BASELINE_OF, parse_config
from capprune.contrastive import EntryMeta, build_positive_set, info_nce
from capprune.data import FAMILIES, generate_synthetic_task
from capprune.evalprobe import encoder_digest, probe_matrix, run_ablation
from capprune.model import MaskedLinear, block_partition
from capprune.orchestrator import load_task, prepare_teachers, run_cap
from capprune.pruners import keep_count, movement_update, topk_mask
from capprune.schedule import SparsitySchedule, cubic_sparsity, milestone_schedule
from conftest import ACCEPTANCE
from oracles import infonce_enumeration, movement_replay, positives_by_filter

pytestmark = pytest.mark.slow


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _random_case(rng, n_max=64, d_max=16, p_max=8):
    n = int(rng.integers(1, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    pos = rng.choice(n, size=int(rng.integers(1, min(p_max, n) + 1)), replace=False)
    return rng.normal(size=d), rng.normal(size=(n, d)), pos, float(rng.choice([0.05, 0.1, 0.2, 0.5]))


# ---------------------------------------------------------------------------
# 1-6, 10: properties


def test_c01_infonce_matches_enumeration():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        anchor, entries, pos, tau = _random_case(rng)
        got = info_nce(torch.from_numpy(anchor), torch.from_numpy(entries), pos, tau).item()
        want = infonce_enumeration(anchor, entries, pos, tau)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-6 and elapsed < 30, f"max rel err {worst:.2e} over 1000 cases in {elapsed:.1f}s")


def test_c02_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        anchor, entries, pos, tau = _random_case(rng, n_max=24, d_max=8)
        e = torch.from_numpy(entries)
        a = torch.from_numpy(anchor).requires_grad_(True)
        (grad,) = torch.autograd.grad(info_nce(a, e, pos, tau), a)
        fd = np.empty_like(anchor)
        for k in range(len(anchor)):
            up, dn = anchor.copy(), anchor.copy()
            up[k] += h
            dn[k] -= h
            fd[k] = (info_nce(torch.from_numpy(up), e, pos, tau).item() - info_nce(torch.from_numpy(dn), e, pos, tau).item()) / (2 * h)
        err = np.linalg.norm(grad.numpy() - fd) / max(np.linalg.norm(fd), 1e-8)
        worst = max(worst, err)
    verdict(2, worst <= 1e-4, f"max rel err {worst:.2e} over 100 fp64 cases")


def test_c03_positive_sets_match_filter():
    rng = np.random.default_rng(33)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 48))
        roles = np.array(rng.choice(["pretrained", "finetuned", "snapshot"], size=n), dtype=object)
        meta = EntryMeta(
            example_index=rng.integers(0, 16, size=n),
            labels=rng.integers(0, 3, size=n),
            role=roles,
            sparsity=np.where(roles == "snapshot", rng.choice([10.0, 40.0, 70.0, 90.0], size=n), 0.0),
        )
        entries = [
            {"index": int(i), "label": int(y), "role": r, "sparsity": float(s)}
            for i, y, r, s in zip(meta.example_index, meta.labels, meta.role, meta.sparsity)
        ]
        idx, label, cur = int(rng.integers(0, 16)), int(rng.integers(0, 3)), float(rng.choice([20.0, 50.0, 90.0]))
        for module in ("prc", "snc", "fic"):
            for mode in ("unsup", "sup"):
                got = build_positive_set(module, mode, idx, label, meta, cur if module == "snc" else None)
                if set(got.positive_indices.tolist()) != positives_by_filter(module, mode, idx, label, entries, cur):
                    mismatches += 1
    verdict(3, mismatches == 0, f"{mismatches} mismatches over 200 configurations x 6 cells")


def test_c04_topk_counts_and_order_invariance():
    g = torch.Generator().manual_seed(4)
    bad = []
    for r in (0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 97):
        for count in (1, 33, 1000, 4097):
            kept = int(topk_mask(torch.randn(count, generator=g), r).sum())
            if kept != int(np.floor((1 - r / 100) * count + 1e-9)) or kept != keep_count(count, r):
                bad.append((r, count))
    rng = np.random.default_rng(44)
    transforms = [lambda x: 2 * x + 1, lambda x: x**3, torch.exp, torch.atan, torch.sigmoid]
    order_fail = 0
    for i in range(100):
        s = torch.from_numpy(rng.permutation(300).astype(np.float64) / 100.0 - 1.5)
        r = float(rng.choice([10, 50, 90, 97]))
        if not torch.equal(topk_mask(s, r), topk_mask(transforms[i % len(transforms)](s), r)):
            order_fail += 1
    verdict(4, not bad and order_fail == 0, f"count errors {bad}, order failures {order_fail}/100")


def test_c05_movement_replay_and_reentry():
    rng = np.random.default_rng(5)
    site = MaskedLinear(6, 4).double()
    ws, gs = [], []
    for _ in range(50):
        w, g = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        with torch.no_grad():
            site.weight.copy_(torch.from_numpy(w))
        movement_update(site, torch.from_numpy(g), 0.01)
        ws.append(w)
        gs.append(g)
    want = movement_replay(ws, gs, 0.01)
    err = float(np.max(np.abs(site.score.numpy() - want)))

    # one slot, two weights: the pruned one must win the slot back
    two = MaskedLinear(2, 1, bias=False).double()
    two.track_grad = True
    with torch.no_grad():
        two.weight.copy_(torch.tensor([[0.5, 0.5]]))
        two.score.copy_(torch.tensor([[1.0, 0.0]]))
    x = torch.tensor([[0.1, 1.0]], dtype=torch.float64)
    history = []
    for _ in range(5):
        two.mask.copy_(topk_mask(two.score, 50))
        history.append(two.mask.tolist()[0])
        two.masked_grad = None
        ((two(x) - 2.0) ** 2).sum().backward()
        movement_update(two, two.masked_grad, 1.0)
    reentered = history[0] == [1.0, 0.0] and history[-1] == [0.0, 1.0]
    verdict(5, err <= 1e-6 and reentered, f"max abs err {err:.2e}; mask history {history[0]} -> {history[-1]}")


def test_c06_schedules():
    s = SparsitySchedule("cubic", initial_sparsity=0.0, final_sparsity=90.0, warmup_end=0, ramp_end=10_000)
    vals = np.array([cubic_sparsity(t, s) for t in range(10_001)])
    ok = (
        vals[0] == 0.0
        and vals[-1] == 90.0
        and cubic_sparsity(5_000, s) == 78.75
        and bool(np.all(np.diff(vals) >= 0))
        and milestone_schedule(97) == [10, 20, 30, 40, 50, 60, 70, 80, 90, 97]
    )
    verdict(6, ok, f"endpoints {vals[0]}/{vals[-1]}, midpoint {cubic_sparsity(5_000, s)}, milestones {milestone_schedule(97)}")


def test_c10_memory_accounting():
    big = RepresentationBank("finetuned", 0.0, np.arange(4096), np.zeros(4096, dtype=np.int64), np.zeros((4096, 768), np.float32))
    values = footprint(big)[1]
    rng = np.random.default_rng(10)
    bank = RepresentationBank("pretrained", 0.0, np.arange(500), rng.integers(0, 2, 500), rng.normal(size=(500, 24)).astype(np.float32))
    n = 64
    for _ in range(30):
        fetch(bank, n, rng, rng.integers(0, 500, 16))
    bound = bank.counter.max_values_per_fetch <= n * 24
    ok = values == 3_145_728 and footprint_for(4096, 768)[1] == 3_145_728 and bound
    verdict(10, ok, f"footprint {values} values; largest fetch {bank.counter.max_values_per_fetch} <= {n * 24}")


# ---------------------------------------------------------------------------
# 7-9, 11-12: runs on the default toy configuration


@pytest.fixture(scope="module")
def default_teachers(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = parse_config({"output_dir": str(root / "teachers")})
    train, dev = load_task(cfg)
    pre, fine = prepare_teachers(cfg, train, cfg.resolved_output_dir())
    return root, (train, dev), (pre, fine)


def _attain(method, r, default_teachers):
    root, data, teachers = default_teachers
    cfg = parse_config({"method": method, "target_sparsity": r, "output_dir": str(root / f"{method}_{r}")})
    start = time.perf_counter()
    art = run_cap(cfg, teachers=teachers, data=data)
    return art, time.perf_counter() - start


@pytest.mark.parametrize("r", [50, 90, 97])
def test_c07_unstructured_attainment(r, default_teachers):
    art, elapsed = _attain("cap_m", r, default_teachers)
    off = abs(art.summary["zeros"] - r / 100 * art.summary["census"])
    per_site = []
    for site in art.model.sites().values():
        per_site.append(abs(int((site.mask == 0).sum()) - r / 100 * site.mask.numel()))
    ok = max(per_site) <= 1 and elapsed < 600
    verdict(7, ok, f"cap_m R={r}: measured {art.summary['measured_sparsity']:.4f}%, {off:.1f} entries off in total, worst site {max(per_site):.2f} entries, {elapsed:.0f}s")


@pytest.mark.parametrize(
    "r",
    [
        50,
        90,
        pytest.param(
            97,
            marks=pytest.mark.xfail(
                strict=True,
                reason="one head per layer is always kept, so the toy encoder tops out at 87.5% structured sparsity",
            ),
        ),
    ],
)
def test_c07_structured_attainment(r, default_teachers):
    art, elapsed = _attain("cap_f", r, default_teachers)
    largest = max(block_partition(art.model).sizes.values())
    off = abs(art.summary["zeros"] - r / 100 * art.summary["census"])
    verdict(
        7,
        off <= largest and elapsed < 600,
        f"cap_f R={r}: measured {art.summary['measured_sparsity']:.4f}%, {off:.0f} entries off (one block = {largest}), {elapsed:.0f}s",
    )


def test_c08_degenerate_cap_is_movement(default_teachers):
    root, data, teachers = default_teachers
    runs = {}
    for name, doc in {
        "cap_m": {"method": "cap_m", "loss": {"prc": 0.0, "snc": 0.0, "fic": 0.0, "kd_weight": 0.0}},
        "movement": {"method": "movement"},
    }.items():
        cfg = parse_config({**doc, "output_dir": str(root / f"degenerate_{name}")})
        runs[name] = run_cap(cfg, teachers=teachers, data=data)
    a, b = runs["cap_m"].mask_digests, runs["movement"].mask_digests
    verdict(8, a == b and len(a) > 0, f"{len(a)} mask states compared, identical={a == b}")


def test_c09_directional_benefit(tmp_path):
    start = time.perf_counter()
    acc = {m: [] for m in ("movement", "cap_m", "first_order", "cap_f")}
    for seed in range(5):
        base = {"target_sparsity": 90, "seed": seed}
        cfg = parse_config({**base, "output_dir": str(tmp_path / f"s{seed}" / "teachers")})
        train, dev = load_task(cfg)
        teachers = prepare_teachers(cfg, train, cfg.resolved_output_dir())
        for method in acc:
            run_cfg = parse_config({**base, "method": method, "output_dir": str(tmp_path / f"s{seed}" / method)})
            acc[method].append(run_cap(run_cfg, teachers=teachers, data=(train, dev)).summary["dev"]["accuracy"])
    elapsed = time.perf_counter() - start
    mean = {m: float(np.mean(v)) for m, v in acc.items()}
    ok = mean["cap_m"] >= mean["movement"] and mean["cap_f"] >= mean["first_order"] and elapsed < 3600
    verdict(
        9,
        ok,
        f"cap_m {mean['cap_m']:.4f} vs movement {mean['movement']:.4f}; "
        f"cap_f {mean['cap_f']:.4f} vs first_order {mean['first_order']:.4f}; {elapsed / 60:.1f} min",
    )


def test_c11_ablation_grid(tmp_path):
    toggles = ["-PrC", "-SnC", "-FiC", "-sup", "-unsup"]
    cfg = parse_config({"output_dir": str(tmp_path / "ablation")})
    table = run_ablation(cfg, toggles, sparsities=[50, 90])
    grid = {row["variant"]: row for row in table.grid()}
    task = cfg.data.family
    ok = list(grid) == ["full", *toggles]
    for v in toggles:
        for s in (50, 90):
            want = table.score(v, task, s) - table.score("full", task, s)
            ok = ok and abs(grid[v][f"delta@{s}"] - want) < 1e-12 and f"{task}@{s}" in grid[v]
    digests = {tuple(sorted(r.teacher_digests.items())) for r in table.rows}
    ok = ok and len(digests) == 1 and len(table.rows) == 12
    deltas = ", ".join(f"{v} {grid[v]['delta@50']:+.3f}/{grid[v]['delta@90']:+.3f}" for v in toggles)
    verdict(11, ok, f"{len(table.rows)} runs, {len(digests)} teacher digest pair(s); delta@50/90: {deltas}")


def test_c12_probe_matrix(tmp_path):
    models = {}
    digests_before = {}
    for source in FAMILIES:
        models[source] = {}
        base = {"data": {"family": source}, "target_sparsity": 90}
        cfg = parse_config({**base, "output_dir": str(tmp_path / source / "teachers")})
        train, dev = load_task(cfg)
        teachers = prepare_teachers(cfg, train, cfg.resolved_output_dir())
        for method in ("movement", "cap_m"):
            run_cfg = parse_config({**base, "method": method, "output_dir": str(tmp_path / source / method)})
            models[source][method] = run_cap(run_cfg, teachers=teachers, data=(train, dev)).model
            digests_before[(source, method)] = encoder_digest(models[source][method])
    vocab = parse_config({}).model.vocab_size
    targets = {f: generate_synthetic_task(f, 400, 2, 1, vocab_size=vocab) for f in FAMILIES}
    results = probe_matrix(models, targets, BASELINE_OF)
    unchanged = all(encoder_digest(models[s][m]) == d for (s, m), d in digests_before.items())
    cells = {(r.source_task, r.target_task) for r in results if r.method == "cap_m"}
    ok = unchanged and cells == {(s, t) for s in FAMILIES for t in FAMILIES} and len(results) == 2 * len(FAMILIES) ** 2
    matrix = " | ".join(
        f"{s}: " + " ".join(f"{r.delta:+.3f}" for r in results if r.source_task == s and r.method == "cap_m") for s in FAMILIES
    )
    verdict(12, ok, f"{len(cells)} source x target cells, encoders unchanged={unchanged}; cap_m delta rows {matrix}")
