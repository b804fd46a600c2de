"""Brute-force oracle suites behind ``gavd selftest``.

Each suite checks a fast routine against a slow, obviously-correct
reference on seeded random inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import AttentionRow, TokenLayout, softmax
from .grounding import KeyframeAnnotation, auroc, keyframe_auroc
from .matching import MatchResult, hungarian_solve
from .objectives import LossConfig, consistency_loss_logits, entropy_loss_logits
from .redistribution import redistribute_proportional


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over every permutation."""
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def pairwise_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counted as half."""
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def central_difference(f, z: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e.flat[i] = step
        g.flat[i] = (f(z + e) - f(z - e)) / (2 * step)
    return g


def check_hungarian(rng: np.random.Generator, trials: int = 200, sizes=range(2, 8)) -> SuiteResult:
    worst = 0.0
    for n in sizes:
        for _ in range(trials):
            c = rng.integers(0, 20, size=(n, n)).astype(float) if rng.random() < 0.5 else rng.random((n, n))
            _, total = hungarian_solve(c)
            worst = max(worst, abs(total - brute_force_assignment(c)))
    return SuiteResult("hungarian", worst == 0.0, f"max |cost - brute force| = {worst:g}")


def check_auroc(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 201))
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        scores = rng.integers(0, 5, size=n).astype(float) if rng.random() < 0.3 else rng.random(n)
        worst = max(worst, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)))
    return SuiteResult("auroc", worst <= 1e-12, f"max deviation {worst:.3g}")


def check_redistribution(rng: np.random.Generator, trials: int = 500) -> SuiteResult:
    failures = 0
    for _ in range(trials):
        frames = int(rng.integers(2, 9))
        layout = TokenLayout.build(1, frames, int(rng.integers(1, 5)), 2)
        flags = rng.integers(0, 2, size=frames)
        flags[rng.integers(frames)] = 1
        ann = KeyframeAnnotation(tuple(int(f) for f in flags))
        row = AttentionRow(0, 0, rng.dirichlet(np.ones(layout.seq_len)))
        new = redistribute_proportional(row, layout, ann)
        vis, key = layout.visual_indices, ann.token_flags(layout) == 1
        ok = abs(new.weights[vis].sum() - row.weights[vis].sum()) <= 1e-9
        ok &= bool(np.all(new.weights[vis[~key]] == 0.0))
        other = np.setdiff1d(np.arange(layout.seq_len), vis)
        ok &= bool(np.array_equal(new.weights[other], row.weights[other]))
        again = redistribute_proportional(new, layout, ann)
        ok &= bool(np.array_equal(again.weights, new.weights))
        if not key.all():
            ok &= keyframe_auroc(new, layout, ann) == 1.0
        failures += not ok
    return SuiteResult("redistribution", failures == 0, f"{failures} of {trials} rows violated the contract")


def check_loss_gradients(rng: np.random.Generator, trials: int = 50) -> SuiteResult:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 12))
        z = rng.normal(0.0, 1.0, n)
        target = softmax(rng.normal(0.0, 1.0, n))
        tau = float(rng.uniform(0.1, 1.0))
        _, (g,) = entropy_loss_logits([z], tau)
        fd = central_difference(lambda x: entropy_loss_logits([x], tau)[0], z)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))))
        cfg = LossConfig()
        match = MatchResult(((0, 0, "exact"),), 0.0, ())
        _, grads = consistency_loss_logits({0: z}, {0: np.log(target)}, match, cfg)
        fd = central_difference(lambda x: consistency_loss_logits({0: x}, {0: np.log(target)}, match, cfg)[0], z)
        worst = max(worst, float(np.max(np.abs(grads[0] - fd)) / max(1.0, np.max(np.abs(fd)))))
    return SuiteResult("loss gradients", worst < 1e-6, f"max scaled deviation {worst:.3g}")


def check_toy_gradients(seed: int = 0, trials: int = 3) -> SuiteResult:
    from .toy.data import generate_dataset
    from .toy.model import ToyModel
    from .toy.train import gradcheck_config, gradient_check

    worst = 0.0
    for s in range(seed, seed + trials):
        cfg = gradcheck_config(s)
        worst = max(worst, gradient_check(ToyModel(cfg), generate_dataset(cfg, 1)[0], seed=s).max_rel_error)
    return SuiteResult("toy model gradients", worst < 1e-4, f"max relative error {worst:.3g}")


def run_all(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    return [check_hungarian(rng), check_auroc(rng), check_redistribution(rng), check_loss_gradients(rng),
            check_toy_gradients(seed)]
