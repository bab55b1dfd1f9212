"""Reliability and informativeness summaries of grade assignments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .posterior import PairwiseMatrices
from .solver import GradeAssignment, assemble_objective, evaluate


def _check(grades, matrices: PairwiseMatrices) -> np.ndarray:
    g = np.asarray(grades)
    if g.shape != (matrices.n,):
        raise ValueError(f"expected {matrices.n} grades, got shape {g.shape}")
    return g


def discordance_rate(grades: Sequence[int], matrices: PairwiseMatrices, p: int | None = None) -> float:
    """Expected share of strictly graded pairs whose order is wrong (``p`` weights by squared gaps)."""
    g = _check(grades, matrices)
    return evaluate(assemble_objective(matrices, 0.0, p), g)[1]


def expected_tau(grades: Sequence[int], matrices: PairwiseMatrices, p: int | None = None) -> float:
    """Posterior expected Kendall rank correlation between grades and latent values."""
    g = _check(grades, matrices)
    return evaluate(assemble_objective(matrices, 0.0, p), g)[2]


@dataclass
class ConditionalDR:
    """Discordance rates between pairs of grades.

    ``dr[a, b]`` (``a > b``) is the DR among pairs with one unit in grade
    ``labels[a]`` and the other in ``labels[b]``; entries on and above the
    diagonal are NaN, as are cells without any weight. ``weights`` are the shares
    of the overall normaliser that each cell (diagonal included) accounts for.
    """

    labels: np.ndarray
    dr: np.ndarray
    bayes_factor: np.ndarray
    weights: np.ndarray
    overall: float
    p: int

    def weighted_average(self) -> float:
        mask = np.isfinite(self.dr)
        return float((self.weights[mask] * self.dr[mask]).sum())


def conditional_dr_matrix(grades: Sequence[int], matrices: PairwiseMatrices, p: int | None = None) -> ConditionalDR:
    g = _check(grades, matrices)
    spec = assemble_objective(matrices, 0.0, p)
    labels = np.unique(g)
    K = len(labels)
    if K < 2:
        raise ValueError("conditional discordance rates need at least two grades")
    if spec.p == 0:
        pair_w = np.ones((spec.n, spec.n))
    else:
        pair_w = matrices.m.astype(float)
    members = [np.flatnonzero(g == lab) for lab in labels]
    dr = np.full((K, K), np.nan)
    weights = np.zeros((K, K))
    for a in range(K):
        ia = members[a]
        block = pair_w[np.ix_(ia, ia)]
        weights[a, a] = np.triu(block, 1).sum() / spec.norm
        for b in range(a):
            ib = members[b]
            w = pair_w[np.ix_(ia, ib)].sum()
            weights[a, b] = w / spec.norm
            if w > 0:
                # units in grade a are placed above those in grade b
                dr[a, b] = spec.disc[np.ix_(ia, ib)].sum() / w
    with np.errstate(divide="ignore", invalid="ignore"):
        bf = (1.0 - dr) / dr
    overall = evaluate(spec, g)[1]
    return ConditionalDR(labels, dr, bf, weights, overall, spec.p)


@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    n_grades: int
    dr: float
    tau_bar: float
    p: int
    comparator: str = ""

    def __post_init__(self):
        if self.dr < -1e-12:
            raise ValueError("discordance rate must be nonnegative")


def comparator_grades(values: Sequence[float]) -> np.ndarray:
    """Full ranking by ``values`` (larger value, larger grade); exact ties share a grade."""
    return rankdata(np.asarray(values, dtype=float), method="dense").astype(int)


def frontier_table(
    sweep: Iterable[tuple[float, GradeAssignment]],
    matrices: PairwiseMatrices | None = None,
    estimates: Sequence[float] | None = None,
    posterior_means: Sequence[float] | None = None,
    p: int | None = None,
) -> list[FrontierPoint]:
    """Frontier points sorted by ``lambda``, followed by flagged naive-ranking comparators."""
    sweep = list(sweep)
    if not sweep:
        raise ValueError("empty lambda sweep")
    points = [
        FrontierPoint(float(lam), int(a.n_grades), float(a.dr), float(a.tau_bar), int(a.p))
        for lam, a in sorted(sweep, key=lambda t: t[0])
    ]
    comparators = [("estimate_rank", estimates), ("posterior_mean_rank", posterior_means)]
    if any(v is not None for _, v in comparators):
        if matrices is None:
            raise ValueError("comparator rows need the pairwise matrices")
        p_eff = points[0].p if p is None else p
        spec = assemble_objective(matrices, 0.0, p_eff)
        for name, values in comparators:
            if values is None:
                continue
            g = comparator_grades(values)
            _, dr, tau = evaluate(spec, g)
            points.append(FrontierPoint(math.nan, int(g.max()), dr, tau, p_eff, name))
    return points


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else f"{x:.6g}"


def write_frontier_csv(path: str | Path, points: Sequence[FrontierPoint]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "p", "n_grades", "dr", "tau_bar", "comparator"])
        for pt in points:
            w.writerow([_fmt(pt.lam), pt.p, pt.n_grades, _fmt(pt.dr), _fmt(pt.tau_bar), pt.comparator])
    return path


def write_dr_matrix_csv(path: str | Path, cond: ConditionalDR, names: Sequence[str] | None = None) -> Path:
    """Long-format table: one row per lower-triangular grade pair."""
    names = [str(x) for x in (names if names is not None else cond.labels)]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["grade_high", "grade_low", "dr", "bayes_factor", "weight"])
        K = len(names)
        for a in range(K):
            for b in range(a):
                w.writerow([names[a], names[b], _fmt(cond.dr[a, b]), _fmt(cond.bayes_factor[a, b]), _fmt(cond.weights[a, b])])
    return path
