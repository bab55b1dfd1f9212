"""Shared constructors for synthetic test instances."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.stats import norm

from reportcard.posterior import PairwiseMatrices

# criterion number -> (passed, detail); filled by test_acceptance.py, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(k: int, checks: dict[str, bool], detail: str) -> None:
    """Store the outcome of an acceptance criterion and fail the test if any check failed."""
    ok = all(checks.values())
    failed = [name for name, v in checks.items() if not v]
    ACCEPTANCE[k] = (ok, detail + ("" if ok else f"  [failed: {', '.join(failed)}]"))
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {ACCEPTANCE[k][1]}")
    assert ok, ACCEPTANCE[k][1]


def normal_pair_matrices(n: int, rng: np.random.Generator, p: int = 0) -> PairwiseMatrices:
    """Independent normal posteriors; ``pi`` (and the p = 2 contrast moments) in closed form."""
    m = rng.normal(0.0, 1.0, n)
    s = rng.uniform(0.2, 1.5, n)
    diff = m[:, None] - m[None, :]
    sd = np.sqrt(s[:, None] ** 2 + s[None, :] ** 2)
    pi = norm.cdf(diff / sd)
    np.fill_diagonal(pi, 0.5)
    mu = mm = None
    if p == 2:
        # E[max(D, 0)^2] for D ~ N(diff, sd^2)
        z = diff / sd
        mu = (diff**2 + sd**2) * norm.cdf(z) + diff * sd * norm.pdf(z)
        mm = diff**2 + sd**2
        np.fill_diagonal(mu, 0.0)
        np.fill_diagonal(mm, 0.0)
    return PairwiseMatrices([f"u{i}" for i in range(n)], pi, p, mu, mm)


def random_pi(n: int, rng: np.random.Generator) -> np.ndarray:
    """Arbitrary (possibly intransitive) antisymmetric pairwise probabilities."""
    pi = np.full((n, n), 0.5)
    for i in range(n):
        for j in range(i + 1, n):
            pi[i, j] = rng.uniform()
            pi[j, i] = 1.0 - pi[i, j]
    return pi


def set_pair(pi: np.ndarray, i: int, j: int, value: float) -> None:
    pi[i, j] = value
    pi[j, i] = 1.0 - value


def simulate_names(seed: int, path: Path, n: int = 76, gap: float = 0.02, base: float = 0.226, trials: int = 1100):
    """Two latent contact-rate clusters ``gap`` apart; returns the cluster labels (1 = higher rate)."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    rate = base + gap * labels
    apps = rng.integers(int(trials * 0.9), int(trials * 1.1) + 1, size=n)
    calls = rng.binomial(apps, rate)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "calls", "apps"])
        for i in range(n):
            w.writerow([f"name{i}", calls[i], apps[i]])
    return labels
