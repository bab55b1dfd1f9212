from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportcard.deconvolution import SplineMixing, point_mass
from reportcard.ingest import UnitRecord
from reportcard.posterior import (
    UnitPosterior,
    between_grade_variance,
    brute_force_pi,
    hierarchical_posteriors,
    pairwise_matrices,
    posterior_summary,
    read_matrix_binary,
    read_matrix_csv,
    unit_posteriors,
    write_matrix_binary,
    write_matrix_csv,
)


def _grid_mixing(support, masses) -> SplineMixing:
    masses = np.asarray(masses, float)
    return SplineMixing(np.asarray(support, float), np.zeros((len(support), 0)), np.zeros(0), masses / masses.sum())


def _random_posteriors(rng, n=5, m=30, ties=True):
    grid = np.sort(rng.uniform(0, 1, m))
    if ties:
        grid = np.round(grid, 2)
    return [UnitPosterior(str(k), grid, rng.dirichlet(np.ones(m)), float(rng.choice([0.5, 1.0, 2.0])))
            for k in range(n)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_prefix_pi_matches_brute_force(seed, ties):
    ups = _random_posteriors(np.random.default_rng(seed), ties=ties)
    fast = pairwise_matrices(ups).pi
    assert np.abs(fast - brute_force_pi(ups)).max() <= 1e-10
    assert np.abs(fast + fast.T - 1).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_square_weighted_moments_match_brute_force(seed):
    ups = _random_posteriors(np.random.default_rng(seed), n=4)
    fast = pairwise_matrices(ups, p=2)
    slow = pairwise_matrices(ups, p=2.0000001)  # non-integer exponent takes the brute-force path
    assert np.allclose(fast.mu, slow.mu, atol=1e-6)
    assert np.allclose(fast.mu + fast.mu.T, fast.m, atol=1e-12)


def test_small_exponent_limit_recovers_pi():
    rng = np.random.default_rng(0)
    grid = np.sort(rng.uniform(0, 1, 30))
    # distinct irrational-ish scales keep every cross-unit pair of atoms apart
    ups = [UnitPosterior(str(k), grid, rng.dirichlet(np.ones(30)), 1.0 + k / np.pi) for k in range(5)]
    near_zero = pairwise_matrices(ups, p=1e-9)
    exact = pairwise_matrices(ups).pi
    off = ~np.eye(5, dtype=bool)
    assert np.abs(near_zero.mu[off] - exact[off]).max() < 1e-6


def test_disjoint_supports_give_one_sided_moments():
    a = UnitPosterior("a", np.array([2.0, 3.0]), np.array([0.5, 0.5]), 1.0)
    b = UnitPosterior("b", np.array([0.0, 1.0]), np.array([0.5, 0.5]), 1.0)
    m = pairwise_matrices([a, b], p=2)
    assert m.pi[0, 1] == 1.0
    assert m.mu[1, 0] == 0.0
    assert m.mu[0, 1] == pytest.approx(m.m[0, 1])


def test_conjugate_normal_shrinkage():
    m0, tau = 0.1, 0.3
    grid = np.linspace(m0 - 8 * tau, m0 + 8 * tau, 2000)
    G = _grid_mixing(grid, np.exp(-0.5 * ((grid - m0) / tau) ** 2))
    units = [UnitRecord("a", 0.8, 0.2), UnitRecord("b", -0.4, 0.5)]
    for up, u in zip(unit_posteriors(units, G, beta=0.0), units):
        w = 1 / u.se**2 / (1 / u.se**2 + 1 / tau**2)
        assert up.mean() == pytest.approx(w * u.estimate + (1 - w) * m0, abs=1e-3)
        var = up.second_moment() - up.mean() ** 2
        assert var == pytest.approx(1 / (1 / u.se**2 + 1 / tau**2), rel=1e-3)


def test_summary_interval_brackets_mean():
    ups = _random_posteriors(np.random.default_rng(1), ties=False)
    for up in ups:
        s90, s95 = posterior_summary(up, 0.90), posterior_summary(up, 0.95)
        assert s95.lo <= s90.lo <= s90.mean <= s90.hi <= s95.hi
        assert s95.lo >= up.theta_grid.min() and s95.hi <= up.theta_grid.max()


def test_far_outlier_collapses_onto_nearest_atom():
    G = _grid_mixing([0.0, 0.1], [0.5, 0.5])
    (up,) = unit_posteriors([UnitRecord("far", 1e6, 1e-3)], G, beta=0.0)
    assert up.weights.tolist() == [0.0, 1.0]


def test_hierarchical_moments_and_pi_against_enumeration():
    rng = np.random.default_rng(0)
    eta = _grid_mixing([0.5, 1.0, 1.5], [0.3, 0.4, 0.3])
    xi = _grid_mixing(np.linspace(0.0, 1.0, 6), rng.dirichlet(np.ones(6)))
    units = [UnitRecord("a", 0.4, 0.2, "g1"), UnitRecord("b", 0.7, 0.3, "g1"), UnitRecord("c", 0.2, 0.25, "g2")]
    hp = hierarchical_posteriors(units, eta, xi, beta=0.0, draws=200_000, seed=3)
    # brute force over the joint grid of the group-1 pair and unit c
    E, X = eta.support, xi.support
    like = lambda u, v: np.exp(-0.5 * ((u.estimate - v) / u.se) ** 2)  # noqa: E731
    joint = {}
    for l1, e1 in enumerate(E):
        for ma, xa in enumerate(X):
            for mb, xb in enumerate(X):
                w1 = eta.masses[l1] * xi.masses[ma] * xi.masses[mb] * like(units[0], e1 * xa) * like(units[1], e1 * xb)
                joint[(e1 * xa, e1 * xb)] = joint.get((e1 * xa, e1 * xb), 0.0) + w1
    tot = sum(joint.values())
    mean_a = sum(k[0] * w for k, w in joint.items()) / tot
    pi_ab = sum(w * ((k[0] > k[1]) + 0.5 * (k[0] == k[1])) for k, w in joint.items()) / tot
    assert hp.summaries[0].mean == pytest.approx(mean_a, abs=1e-12)
    assert abs(hp.matrices.pi[0, 1] - pi_ab) < 5 * hp.matrices.pi_se[0, 1] + 1e-9
    assert hp.ess == 200_000
    assert np.allclose(hp.matrices.pi + hp.matrices.pi.T, 1.0)


def test_hierarchical_draw_floor():
    eta, xi = point_mass(1.0), _grid_mixing([0.0, 1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        hierarchical_posteriors([UnitRecord("a", 0.1, 0.1, "g")], eta, xi, 0.0, draws=100)


def test_between_grade_variance_limits():
    means = np.array([0.1, 0.2, 0.3, 0.5])
    # degenerate posteriors: second moment equals squared mean
    between, r2 = between_grade_variance([1, 2, 3, 4], means, means**2, marginal_variance=means.var())
    assert between == pytest.approx(means.var())
    assert r2 == pytest.approx(1.0)
    assert between_grade_variance([1, 1, 1, 1], means, means**2 + 0.01)[0] == 0.0


def test_matrix_round_trips(tmp_path):
    mat = np.random.default_rng(0).uniform(size=(4, 4))
    write_matrix_binary(tmp_path / "m.bin", mat)
    assert np.array_equal(read_matrix_binary(tmp_path / "m.bin"), mat)
    write_matrix_csv(tmp_path / "m.csv", list("abcd"), mat)
    ids, back = read_matrix_csv(tmp_path / "m.csv")
    assert ids == list("abcd") and np.allclose(back, mat, rtol=1e-5)
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(ValueError):
        read_matrix_binary(tmp_path / "bad.bin")
