from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import Bounds, LinearConstraint, milp

from reportcard.posterior import PairwiseMatrices
from reportcard.solver import (
    FUBINI,
    I_WORSE,
    J_WORSE,
    TIE,
    assemble_objective,
    condorcet_ranks,
    enumerate_oracle,
    evaluate,
    exact_solve,
    export_lp,
    heuristic_solve,
    lambda_sweep,
    milp_model,
    pairwise_threshold,
    relabel,
    satisfies_transitivity,
    solve,
    weak_orders,
)

from helpers import normal_pair_matrices, random_pi


@pytest.mark.parametrize("n", range(1, 7))
def test_weak_orders_count_matches_fubini(n):
    W = weak_orders(n)
    assert len(W) == FUBINI[n]
    assert len({tuple(r) for r in W}) == FUBINI[n]


def test_every_weak_order_is_transitive():
    for row in weak_orders(4):
        assert satisfies_transitivity(row)


def test_pairwise_threshold_rule():
    assert pairwise_threshold(0.9, 0.25) == I_WORSE
    assert pairwise_threshold(0.1, 0.25) == J_WORSE
    assert pairwise_threshold(0.8, 0.25) == TIE  # boundary is a tie
    assert pairwise_threshold(0.5, 1.0) == TIE
    assert pairwise_threshold(0.51, 1.0) == I_WORSE
    with pytest.raises(ValueError):
        pairwise_threshold(1.2, 0.5)


def test_lambda_zero_ties_everything():
    rng = np.random.default_rng(0)
    a = solve(assemble_objective(normal_pair_matrices(6, rng), 0.0))
    assert a.n_grades == 1 and a.dr == 0 and a.tau_bar == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.floats(0, 1), st.integers(0, 10**6))
def test_exact_matches_oracle_on_arbitrary_pi(n, lam, seed):
    rng = np.random.default_rng(seed)
    mats = PairwiseMatrices([str(i) for i in range(n)], random_pi(n, rng))
    spec = assemble_objective(mats, lam)
    a, b = exact_solve(spec), enumerate_oracle(spec)
    assert abs(a.risk - b.risk) <= 1e-9
    assert satisfies_transitivity(a.grades)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10**6))
def test_lambda_one_equals_kemeny(n, seed):
    """At lambda = 1 the optimum is a Kemeny ranking: no weak order beats the best total order."""
    rng = np.random.default_rng(seed)
    spec = assemble_objective(normal_pair_matrices(n, rng), 1.0)
    best_total = min(evaluate(spec, np.argsort(perm) + 1)[0] for perm in itertools.permutations(range(n)))
    assert abs(exact_solve(spec).risk - best_total) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.floats(0, 1), st.integers(0, 10**6))
def test_sign_symmetry(n, lam, seed):
    """Negating the estimand reverses the optimal grades and leaves the risk unchanged."""
    rng = np.random.default_rng(seed)
    mats = normal_pair_matrices(n, rng)
    a = exact_solve(assemble_objective(mats, lam))
    spec_t = assemble_objective(mats.transposed(), lam)
    b = exact_solve(spec_t)
    assert abs(a.risk - b.risk) <= 1e-12
    reversed_a = a.grades.max() + 1 - a.grades
    assert abs(evaluate(spec_t, reversed_a)[0] - b.risk) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 7), st.integers(0, 10**6))
def test_discordance_rate_is_monotone_in_lambda(n, seed):
    rng = np.random.default_rng(seed)
    mats = normal_pair_matrices(n, rng)
    drs = [exact_solve(assemble_objective(mats, lam)).dr for lam in np.linspace(0, 1, 11)]
    assert all(b >= a - 1e-12 for a, b in zip(drs, drs[1:]))


def test_heuristic_never_beats_exact_and_is_transitive():
    rng = np.random.default_rng(11)
    for _ in range(20):
        spec = assemble_objective(normal_pair_matrices(9, rng), float(rng.uniform()))
        h, e = heuristic_solve(spec, restarts=10), exact_solve(spec)
        assert h.risk >= e.risk - 1e-12
        assert satisfies_transitivity(h.grades)


def test_heuristic_large_instance_improves_on_all_tied():
    rng = np.random.default_rng(5)
    spec = assemble_objective(normal_pair_matrices(40, rng), 0.5)
    a = solve(spec)
    assert a.method and a.risk <= 0.0
    assert satisfies_transitivity(a.grades)


def test_solver_modes_and_errors():
    rng = np.random.default_rng(1)
    spec = assemble_objective(normal_pair_matrices(5, rng), 0.4)
    assert solve(spec, mode="exact").risk == pytest.approx(solve(spec, mode="heuristic").risk, abs=1e-12)
    with pytest.raises(ValueError):
        solve(spec, mode="bogus")
    with pytest.raises(ValueError):
        assemble_objective(normal_pair_matrices(3, rng), 1.5)
    with pytest.raises(ValueError):
        enumerate_oracle(assemble_objective(normal_pair_matrices(10, rng), 0.5))


def test_risk_decomposition_for_p2():
    rng = np.random.default_rng(2)
    mats = normal_pair_matrices(6, rng, p=2)
    spec = assemble_objective(mats, 0.3, p=2)
    a = exact_solve(spec)
    assert a.risk == pytest.approx((1 - 0.3) * a.dr - 0.3 * a.tau_bar, abs=1e-12)
    with pytest.raises(ValueError):
        assemble_objective(normal_pair_matrices(3, rng), 0.3, p=2)


def test_relabel_and_condorcet_ranks():
    assert relabel([5, 2, 5, 9]).tolist() == [2, 1, 2, 3]
    assert condorcet_ranks([3, 1, 3, 2]).tolist() == [1, 4, 1, 3]


def test_lambda_sweep_adds_lambda_one_and_ranks():
    rng = np.random.default_rng(4)
    sweep = lambda_sweep(normal_pair_matrices(6, rng), [0.25])
    assert [lam for lam, _ in sweep] == [0.25, 1.0]
    top = sweep[-1][1]
    assert (top.condorcet_rank == condorcet_ranks(top.grades)).all()


def test_lp_model_size_for_three_units():
    rng = np.random.default_rng(0)
    model = milp_model(assemble_objective(normal_pair_matrices(3, rng), 0.5))
    assert len(model.names) == 9
    assert len(model.rows) == 12


@pytest.mark.parametrize("seed", range(6))
def test_lp_model_agrees_with_exact_solver(seed):
    rng = np.random.default_rng(seed)
    n = 3 + seed % 3
    spec = assemble_objective(normal_pair_matrices(n, rng), float(rng.uniform()))
    model = milp_model(spec)
    A = np.zeros((len(model.rows), len(model.names)))
    lo, hi = np.empty(len(model.rows)), np.empty(len(model.rows))
    for r, (coefs, sense, rhs) in enumerate(model.rows):
        for k, v in coefs.items():
            A[r, k] = v
        lo[r], hi[r] = (rhs, rhs) if sense == "=" else (-np.inf, rhs)
    res = milp(model.c, constraints=LinearConstraint(A, lo, hi), integrality=np.ones(len(model.c)),
               bounds=Bounds(0, 1))
    assert res.success
    assert res.fun / spec.norm == pytest.approx(exact_solve(spec).risk, abs=1e-9)


def test_export_lp_writes_binary_section(tmp_path):
    rng = np.random.default_rng(0)
    spec = assemble_objective(normal_pair_matrices(4, rng), 0.5)
    text = export_lp(spec, tmp_path / "m.lp").read_text()
    assert text.startswith("\\") and "Minimize" in text and "Subject To" in text
    binaries = text.split("Binary\n")[1].split("End")[0].split()
    assert len(binaries) == 3 * 6
