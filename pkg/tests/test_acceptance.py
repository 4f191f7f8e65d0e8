"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import central_difference, greedy_hypersphere_oracle
from nsgp_repre.data import generate
from nsgp_repre.harness import ExperimentConfig, anatomy_report, run_experiment, write_run
from nsgp_repre.model import init_model, total_loss
from nsgp_repre.nsgp import (EXACT_ZERO, CovarianceAccumulator, NullityPolicy, apply_update,
                             compute_projection, project_gradient)
from nsgp_repre.prototypes import Prototype, PrototypeStore, replay_loss, select_fine_prototypes

# thresholds pinned by the reference runs under reference/
PINNED = json.loads((Path(__file__).parents[1] / "reference" / "thresholds.json").read_text())
SEEDS = PINNED["ablation"]["seeds"]
FULL_MARGIN = PINNED["ablation"]["full_minus_finetune_min"]
ANATOMY_SEEDS = PINNED["anatomy"]["seeds"]
ANATOMY_MSE_RATIO = PINNED["anatomy"]["designated_over_fresh_mse_max"]
ANATOMY_DROP = PINNED["anatomy"]["old_class_accuracy_drop_min"]


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail} ({elapsed:.1f}s)")
    return emit


def test_1_projector_laws(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = np.zeros(3)
    for trial in range(100):
        d = int(rng.integers(4, 65))
        k = int(rng.integers(1, d + 1))
        acc = CovarianceAccumulator(d)
        for _ in range(int(rng.integers(1, 4))):
            acc.accumulate(rng.normal(size=(int(rng.integers(1, 80)), k)) @ rng.normal(size=(k, d)))
            acc.commit_stage()
        proj = compute_projection(acc, NullityPolicy(mode=(EXACT_ZERO, "energy")[trial % 2]))
        B = proj.B
        worst = np.maximum(worst, [np.linalg.norm(B @ B - B), np.linalg.norm(B - B.T),
                                   abs(np.trace(B) - proj.nullity)])
    elapsed = time.perf_counter() - t0
    ok = worst[0] <= 1e-8 and worst[1] <= 1e-10 and worst[2] <= 1e-6 and elapsed < 10
    report(1, "projector laws", ok, f"max |B^2-B|={worst[0]:.1e}, |B-B^T|={worst[1]:.1e}, "
           f"|tr B - R|={worst[2]:.1e}", elapsed)
    assert ok


def test_2_null_space_contract(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for d, k in [(8, 3), (16, 5), (32, 31), (64, 10)]:
        X = rng.normal(size=(200, k)) @ rng.normal(size=(k, d))
        acc = CovarianceAccumulator(d)
        acc.accumulate(X).commit_stage()
        proj = compute_projection(acc, NullityPolicy(mode=EXACT_ZERO))
        assert proj.nullity == d - k
        W0 = rng.normal(size=(d, 12))
        W = W0
        for _ in range(100):
            W = apply_update(W, project_gradient(rng.normal(size=(d, 12)), proj), 0.1)
        change = np.linalg.norm(X @ W - X @ W0, axis=1) / np.linalg.norm(X @ W0, axis=1)
        worst = max(worst, float(change.max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    report(2, "null-space contract", ok, f"max relative output change {worst:.1e}", elapsed)
    assert ok


def test_3_streaming_covariance(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 40))
        x = rng.normal(size=(int(rng.integers(50, 3000)), d)) * rng.uniform(0.01, 100)
        acc = CovarianceAccumulator(d)
        stages = np.array_split(x, int(rng.integers(1, 6)))
        for stage in stages:
            cuts = np.sort(rng.integers(0, len(stage) + 1, size=int(rng.integers(0, 6))))
            for chunk in np.split(stage, cuts):
                acc.accumulate(chunk)
            acc.commit_stage()
        pooled = x.T @ x / len(x)
        worst = max(worst, float(np.linalg.norm(acc.second_moment - pooled) / np.linalg.norm(pooled)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    report(3, "streaming covariance", ok, f"max relative error {worst:.1e}", elapsed)
    assert ok


def test_4_selection_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        n, d = int(rng.integers(1, 51)), int(rng.integers(2, 8))
        centers = rng.normal(size=(int(rng.integers(1, 5)), d))
        x = centers[rng.integers(0, len(centers), size=n)] + rng.normal(scale=rng.uniform(0.05, 1.0), size=(n, d))
        r, K = float(rng.uniform(0.05, 0.95)), int(rng.integers(1, 11))
        got = select_fine_prototypes(x, r=r, K=K)
        want = greedy_hypersphere_oracle(x.tolist(), r, K)
        same = len(got) == len(want) and all(
            p.member_count == len(members) and np.array_equal(p.vector, x[members].mean(axis=0))
            for p, (_, members, _) in zip(got, want))
        mismatches += not same
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    report(4, "prototype selection oracle", ok, f"{200 - mismatches}/200 exact matches", elapsed)
    assert ok


def test_5_gradient_exactness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = init_model(5, (6, 4), 3, 2, seed=seed)
        for layer in model.layers:
            layer.W = rng.normal(size=layer.W.shape)
            layer.b = rng.normal(size=layer.b.shape)
        model.touch()
        x, labels, targets = rng.normal(size=(7, 5)), rng.integers(0, 3, 7), rng.normal(size=(7, 2))

        def loss():
            model.touch()
            return total_loss(model, x, labels, targets)[0].total

        _, grads = total_loss(model, x, labels, targets)
        for (gW, gb), layer in zip(grads.as_list(), model.layers):
            for g, arr in ((gW, layer.W), (gb, layer.b)):
                num = central_difference(loss, arr)
                worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12))

        store = PrototypeStore(K=3, r=0.6, coarse={c: Prototype(c, "coarse", rng.normal(size=4), 4)
                                                   for c in range(3)})
        store.fine[0] = [Prototype(0, "fine", rng.normal(size=4), 2)]
        W, b = rng.normal(size=(4, 4)), rng.normal(size=4)
        _, (gW, gb) = replay_loss(store, W, b)
        for g, arr in ((gW, W), (gb, b)):
            num = central_difference(lambda: replay_loss(store, W, b)[0], arr)
            worst = max(worst, np.linalg.norm(g - num) / np.linalg.norm(num))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 30
    report(5, "gradient exactness", ok, f"max relative error {worst:.1e} over 20 seeds", elapsed)
    assert ok


def test_6_ablation_ordering(report):
    t0 = time.perf_counter()
    methods = ["finetune", "nsgp", "repre_coarse", "nsgp_repre", "joint"]
    med = {}
    for m in methods:
        vals = [run_experiment(ExperimentConfig(method=m).with_seed(s)).record.avg_old_accuracy() for s in SEEDS]
        med[m] = float(np.median(vals))
    elapsed = time.perf_counter() - t0
    clauses = {
        "finetune < nsgp": med["finetune"] < med["nsgp"],
        "finetune < repre_coarse": med["finetune"] < med["repre_coarse"],
        "nsgp < nsgp_repre": med["nsgp"] < med["nsgp_repre"],
        "repre_coarse < nsgp_repre": med["repre_coarse"] < med["nsgp_repre"],
        "nsgp_repre <= joint": med["nsgp_repre"] <= med["joint"],
        f"nsgp_repre >= finetune + {FULL_MARGIN}": med["nsgp_repre"] >= med["finetune"] + FULL_MARGIN,
        "runtime < 300s": elapsed < 300,
    }
    failed = [k for k, v in clauses.items() if not v]
    medians = ", ".join(f"{m}={v:.3f}" for m, v in med.items())
    report(6, "ablation ordering", not failed,
           f"medians {medians}" + (f"; failed: {'; '.join(failed)}" if failed else ""), elapsed)
    assert not failed, failed


def test_7_anatomy(report):
    t0 = time.perf_counter()
    worst_ratio, worst_drop = 0.0, 1.0
    for s in ANATOMY_SEEDS:
        res = run_experiment(ExperimentConfig(method="finetune").with_seed(s))
        rows = anatomy_report(res.checkpoints, [st.test for st in generate(res.config.task)])
        old = [r for r in rows if r["eval_stage"] < r["model_stage"]]
        worst_ratio = max(worst_ratio, max(r["designated_mse"] / r["fresh_mse"] for r in old))
        last = max(r["model_stage"] for r in rows)
        final_old = [r for r in old if r["model_stage"] == last]
        drop = np.mean([r["fresh_accuracy"] for r in final_old]) - np.mean([r["plain_accuracy"] for r in final_old])
        worst_drop = min(worst_drop, float(drop))
    elapsed = time.perf_counter() - t0
    ok = worst_ratio <= ANATOMY_MSE_RATIO and worst_drop >= ANATOMY_DROP and elapsed < 180
    report(7, "anatomy", ok, f"worst designated/fresh MSE {worst_ratio:.3f} (<= {ANATOMY_MSE_RATIO}), "
           f"smallest old-class accuracy drop {worst_drop:.3f} (>= {ANATOMY_DROP}) over seeds 0-4", elapsed)
    assert ok


def test_8_determinism(report, tmp_path):
    t0 = time.perf_counter()
    names = ["metrics.csv", "metrics.json"]
    same = True
    for method in ("nsgp_repre", "joint"):
        for d in ("a", "b"):
            write_run(run_experiment(ExperimentConfig(method=method).with_seed(3)), tmp_path / method / d)
        same &= all((tmp_path / method / "a" / n).read_bytes() == (tmp_path / method / "b" / n).read_bytes()
                    for n in names)
    elapsed = time.perf_counter() - t0
    report(8, "determinism", same, "metrics files byte-identical across re-runs" if same
           else "metrics files differ between re-runs", elapsed)
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
