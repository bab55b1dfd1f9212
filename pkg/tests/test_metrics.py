from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportcard.metrics import (
    FrontierPoint,
    comparator_grades,
    conditional_dr_matrix,
    discordance_rate,
    expected_tau,
    frontier_table,
    write_dr_matrix_csv,
    write_frontier_csv,
)
from reportcard.posterior import PairwiseMatrices
from reportcard.solver import assemble_objective, lambda_sweep

from helpers import normal_pair_matrices


def _two(pi):
    return PairwiseMatrices(["a", "b"], np.array([[0.5, pi], [1 - pi, 0.5]]))


def test_two_unit_values():
    m = _two(0.9)
    assert discordance_rate([2, 1], m) == pytest.approx(0.1)
    assert expected_tau([2, 1], m) == pytest.approx(0.8)
    assert discordance_rate([1, 1], m) == 0.0
    assert expected_tau([1, 1], m) == 0.0


def test_perfect_confident_order_has_unit_tau():
    n = 5
    pi = np.triu(np.zeros((n, n))) + np.tril(np.ones((n, n)), -1)
    np.fill_diagonal(pi, 0.5)
    m = PairwiseMatrices([str(i) for i in range(n)], pi)
    grades = np.arange(1, n + 1)
    assert expected_tau(grades, m) == pytest.approx(1.0)
    assert discordance_rate(grades, m) == 0.0


def test_bayes_factor_is_one_at_half():
    c = conditional_dr_matrix([2, 1], _two(0.5))
    assert c.dr[1, 0] == pytest.approx(0.5)
    assert c.bayes_factor[1, 0] == pytest.approx(1.0)


def test_grade_count_validation():
    with pytest.raises(ValueError):
        conditional_dr_matrix([1, 1], _two(0.7))
    with pytest.raises(ValueError):
        discordance_rate([1, 2, 3], _two(0.7))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10**6), st.sampled_from([0, 2]))
def test_weighted_average_identity(n, seed, p):
    rng = np.random.default_rng(seed)
    mats = normal_pair_matrices(n, rng, p=2)
    grades = rng.integers(1, 4, n)
    if len(np.unique(grades)) < 2:
        grades[0], grades[1] = 1, 2
    c = conditional_dr_matrix(grades, mats, p)
    assert c.weighted_average() == pytest.approx(c.overall, abs=1e-12)
    assert np.nansum(c.weights[np.tril_indices(len(c.labels))]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10**6))
def test_reversed_strict_order_mirrors_dr(n, seed):
    rng = np.random.default_rng(seed)
    mats = normal_pair_matrices(n, rng)
    g = rng.permutation(n) + 1
    assert discordance_rate(n + 1 - g, mats) == pytest.approx(1 - discordance_rate(g, mats), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.floats(0, 1), st.integers(0, 10**6), st.sampled_from([0, 2]))
def test_risk_identity(n, lam, seed, p):
    from reportcard.solver import evaluate

    rng = np.random.default_rng(seed)
    mats = normal_pair_matrices(n, rng, p=2)
    g = rng.integers(1, 4, n)
    risk = evaluate(assemble_objective(mats, lam, p), g)[0]
    dr, tau = discordance_rate(g, mats, p), expected_tau(g, mats, p)
    assert (1 - lam) * dr - lam * tau == pytest.approx(risk, abs=1e-10)


def test_frontier_table_sorted_with_comparators(tmp_path):
    rng = np.random.default_rng(3)
    mats = normal_pair_matrices(7, rng)
    sweep = lambda_sweep(mats, [0.6, 0.0, 0.3], mode="exact")
    est = rng.normal(size=7)
    pts = frontier_table(reversed(sweep), mats, estimates=est, posterior_means=est + 0.01)
    main = [p for p in pts if not p.comparator]
    assert [p.lam for p in main] == sorted(p.lam for p in main)
    assert main[0].lam == 0.0 and main[0].n_grades == 1 and main[0].dr == 0 and main[0].tau_bar == 0
    comps = [p for p in pts if p.comparator]
    assert [p.comparator for p in comps] == ["estimate_rank", "posterior_mean_rank"]
    assert all(math.isnan(p.lam) for p in comps)
    path = write_frontier_csv(tmp_path / "f.csv", pts)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["lambda", "p", "n_grades", "dr", "tau_bar", "comparator"]
    assert len(rows) == len(pts)
    with pytest.raises(ValueError):
        frontier_table([])
    with pytest.raises(ValueError):
        FrontierPoint(0.1, 2, -0.5, 0.1, 0)


def test_comparator_grades_rank_values():
    assert comparator_grades([0.3, -1.0, 0.3, 2.0]).tolist() == [2, 1, 2, 3]


def test_dr_matrix_csv(tmp_path):
    rng = np.random.default_rng(9)
    mats = normal_pair_matrices(6, rng)
    c = conditional_dr_matrix([1, 1, 2, 2, 3, 3], mats)
    rows = list(csv.reader(write_dr_matrix_csv(tmp_path / "d.csv", c, ["low", "mid", "high"]).open()))
    assert rows[0] == ["grade_high", "grade_low", "dr", "bayes_factor", "weight"]
    assert [r[:2] for r in rows[1:]] == [["mid", "low"], ["high", "low"], ["high", "mid"]]
