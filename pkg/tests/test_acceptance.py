"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) or through pytest; in the
latter case the lines are collected and echoed in the terminal summary.
"""

from __future__ import annotations

import functools
import itertools
import sys
import time

import numpy as np
import pytest

from glmnet import cli
from glmnet import diffcore as dc
from glmnet.config import TrainConfig
from glmnet.datasynth import SynthConfig, batch_split, generate_dataset
from glmnet.matchhead import (
    constraint_loss,
    constraint_loss_bruteforce,
    hungarian_discretize,
    matching_accuracy,
    nearest_neighbor_pairs,
    sinkhorn,
)
from glmnet.trainer import dumps_checkpoint, evaluate, loads_checkpoint, predict, train

RESULTS: dict[int, str] = {}

TOY_EPOCHS = 100
ABLATION_SEEDS = range(5)
ABLATION_VARIANTS = {
    "full": {},
    "no-sharpening": dict(sharpening=False),
    "no-sharpening-no-constraint": dict(sharpening=False, constraint_loss=False),
    "no-graph-learning": dict(sharpening=False, constraint_loss=False, graph_learning=False),
}


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    RESULTS[number] = line
    print(line)


@functools.lru_cache(maxsize=None)
def toy_split():
    data = generate_dataset(SynthConfig(n_inliers=10, n_outliers=2, noise_sigma=0.05, seed=0), 250)
    return batch_split(data, 0.8, seed=0)


@functools.lru_cache(maxsize=None)
def toy_run(variant: str = "full", seed: int = 0, lam: float | None = None):
    """Train on the toy split; returns (seconds, history, test metrics)."""
    train_data, test_data = toy_split()
    config = TrainConfig(epochs=TOY_EPOCHS, seed=seed, **ABLATION_VARIANTS[variant])
    if lam is not None:
        config = config.replace(lam=lam)
    start = time.perf_counter()
    state = train(train_data, config)
    seconds = time.perf_counter() - start
    return seconds, state.history, evaluate(test_data, state.store, config)


def test_criterion_1_gradient_check():
    start = time.perf_counter()
    config = TrainConfig(widths=(16, 16, 16), graph_theta_scale=1.0)
    pair = cli.random_problem(5, 5, 8, seed=0)
    rep = cli.gradcheck_report(config, pair, h=1e-5, tol=1e-4, max_entries=None)
    seconds = time.perf_counter() - start
    passed = rep.passed and seconds < 30 and len(rep.max_rel_error) == 10
    report(1, passed, f"worst rel err {rep.worst:.2e} over {len(rep.max_rel_error)} groups, {seconds:.1f}s")
    assert passed, "\n".join(rep.lines())


def test_criterion_1_unit_temperatures():
    config = TrainConfig(widths=(16, 16, 16), graph_theta_scale=1.0, delta=1.0, delta_p=1.0)
    rep = cli.gradcheck_report(config, cli.random_problem(5, 5, 8, seed=1), 1e-5, 1e-4, None)
    assert rep.passed, "\n".join(rep.lines())


def test_criterion_2_sinkhorn_contract():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        c = sinkhorn(dc.constant(rng.uniform(1e-3, 1.0, size=(6, 6))), iterations=20).value
        worst = max(worst, np.abs(c.sum(axis=1) - 1).max(), np.abs(c.sum(axis=0) - 1).max())
    seconds = time.perf_counter() - start
    passed = worst < 1e-6 and seconds < 1.0
    report(2, passed, f"max marginal deviation {worst:.2e}, {seconds:.2f}s")
    assert passed


def test_criterion_3_constraint_loss_oracle():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(2, 8, size=2)
        c = rng.uniform(size=(m, n))
        worst = max(worst, abs(constraint_loss(dc.constant(c)).item() - constraint_loss_bruteforce(c)))
    nonzero_perm = 0
    for n in range(1, 8):
        eye = np.eye(n)
        for perm in itertools.permutations(range(n)):
            p = eye[list(perm)]
            if constraint_loss(dc.constant(p)).item() != 0.0 or constraint_loss_bruteforce(p) != 0.0:
                nonzero_perm += 1
    seconds = time.perf_counter() - start
    passed = worst < 1e-10 and nonzero_perm == 0 and seconds < 5.0
    report(3, passed, f"max |closed - brute| {worst:.2e}, {nonzero_perm} nonzero permutations, {seconds:.2f}s")
    assert passed


def exhaustive_best(score: np.ndarray) -> list[tuple[int, int]]:
    n = score.shape[0]
    perms = np.array(list(itertools.permutations(range(n))))
    totals = score[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmax(totals))]
    return [(i, int(best[i])) for i in range(n)]


def test_criterion_4_hungarian_oracle():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    mismatches = 0
    for k in range(50):
        n = 5 if k < 25 else 6
        score = rng.uniform(size=(n, n))
        if hungarian_discretize(score) != exhaustive_best(score):
            mismatches += 1
    seconds = time.perf_counter() - start
    passed = mismatches == 0 and seconds < 5.0
    report(4, passed, f"{mismatches}/50 mismatches, {seconds:.2f}s")
    assert passed


def test_criterion_5_toy_learning():
    seconds, history, metrics = toy_run()
    _, test_data = toy_split()
    hits = total = 0
    for pair in test_data:
        expected = int(pair.truth.sum())
        hits += round(matching_accuracy(nearest_neighbor_pairs(pair.x_feats, pair.y_feats), pair.truth) * expected)
        total += expected
    baseline = hits / total
    acc = metrics["accuracy_hungarian"]
    passed = acc >= 0.90 and baseline <= acc and seconds < 600 and len(history) <= 500
    report(5, passed, f"test acc {acc:.3f} (raw NN {baseline:.3f}) after {len(history)} epochs, {seconds:.0f}s")
    assert passed


def test_criterion_6_ablation_trend():
    means = {}
    for variant in ABLATION_VARIANTS:
        accs = [toy_run(variant, seed)[2]["accuracy_hungarian"] for seed in ABLATION_SEEDS]
        means[variant] = float(np.mean(accs))
    chain = [means["full"], means["no-sharpening"], means["no-graph-learning"]]
    passed = chain[0] >= chain[1] >= chain[2]
    shown = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    report(6, passed, f"mean test acc over {len(ABLATION_SEEDS)} seeds: {shown}")
    assert passed


def test_criterion_7_constraint_loss_effect():
    with_con = toy_run("full", 0)[2]["l_con"]
    without = toy_run("full", 0, lam=0.0)[2]["l_con"]
    passed = with_con < without
    report(7, passed, f"eval mean L_con {with_con:.4f} (lambda 0.1) vs {without:.4f} (lambda 0)")
    assert passed


def test_criterion_8_determinism_and_persistence():
    data = generate_dataset(SynthConfig(n_inliers=6, n_outliers=1, knn_k=3, feature_dim=10, seed=5), 8)
    config = TrainConfig(epochs=3, seed=9, widths=(16, 16, 16))
    first, second = train(data, config), train(data, config)
    same_history = first.history == second.history
    restored = loads_checkpoint(dumps_checkpoint(first))
    bit_identical = all(
        np.array_equal(predict(p, first.store, config).soft.value, predict(p, restored.store, restored.config).soft.value)
        for p in data
    )
    passed = same_history and bit_identical
    report(8, passed, f"histories identical: {same_history}, checkpoint forward bit-identical: {bit_identical}")
    assert passed


def test_invariant_loss_decreases_over_seeds():
    ok = []
    for seed in ABLATION_SEEDS:
        losses = [r["loss"] for r in toy_run("full", seed)[1]]
        ok.append(np.mean(losses[:10]) > np.mean(losses[-10:]))
    assert all(ok)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
