from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportcard.deconvolution import (
    SplineMixing,
    _baseline_evaluator,
    _log_lik_matrix,
    _penalised_ascent,
    build_support,
    calibrate_penalty,
    fit_hierarchical,
    fit_logspline,
    mixing_moments,
    point_mass,
    spline_basis,
    v_scale,
)
from reportcard.ingest import UnitRecord
from reportcard.precision import fit_gmm


def _sim_units(seed=0, n=300, beta=0.0, grouped=False):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.05, 0.15, n)
    v = rng.gamma(2.0, 0.1, n)
    if grouped:
        groups = rng.integers(0, 15, n)
        v = v * rng.gamma(8.0, 1 / 8.0, 15)[groups]
    theta = s**beta * v + rng.normal(0, s)
    return [UnitRecord(f"u{i}", float(theta[i]), float(s[i]), f"g{groups[i]}" if grouped else None) for i in range(n)]


def test_spline_basis_is_centred_orthonormal():
    Q = spline_basis(200, 5)
    assert Q.shape == (200, 5)
    assert np.allclose(Q.T @ Q, np.eye(5), atol=1e-10)
    assert np.allclose(Q.sum(axis=0), 0.0, atol=1e-10)
    assert spline_basis(1).shape == (1, 0)


def test_build_support_rule():
    grid = build_support([0.1, 0.9], mean=0.2, sd=0.1, m=50)
    assert grid[0] == 0.0 and grid[-1] == pytest.approx(0.9) and len(grid) == 50
    assert build_support([0.1], mean=0.2, sd=0.1, m=10)[-1] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        build_support([-1.0], mean=-1.0, sd=0.01, m=10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0.0, 5.0))
def test_group_norm_ascent_matches_closed_form(b, c):
    """Maximiser of -|x - b|^2 / 2 - c |x| is block soft-thresholding of b."""
    b = np.asarray(b)

    def evaluate(x, hess=True):
        f, g = -0.5 * float((x - b) @ (x - b)), b - x
        return (f, g, -np.eye(3)) if hess else (f, g)

    x, _, _ = _penalised_ascent(evaluate, [slice(0, 3)], [c], np.zeros(3))
    nb = np.linalg.norm(b)
    expected = b * max(0.0, 1 - c / nb) if nb > 0 else np.zeros(3)
    assert np.allclose(x, expected, atol=1e-7)


def test_analytic_gradient_and_hessian():
    units = _sim_units(n=60)
    x, sd = v_scale(units, 0.0)
    support = build_support(x, 0.2, 0.15, 80)
    ev = _baseline_evaluator(_log_lik_matrix(x, sd, support), spline_basis(80))
    a = np.array([0.3, -0.2, 0.5, 0.1, -0.4])
    f, g, H = ev(a, True)
    h = 1e-6
    num_g = np.array([(ev(a + h * e, False)[0] - ev(a - h * e, False)[0]) / (2 * h) for e in np.eye(5)])
    num_H = np.array([(ev(a + h * e, False)[1] - ev(a - h * e, False)[1]) / (2 * h) for e in np.eye(5)])
    assert np.allclose(g, num_g, rtol=1e-5, atol=1e-6)
    assert np.allclose(H, num_H, rtol=1e-4, atol=1e-5)


def test_fit_satisfies_optimality_condition():
    units = _sim_units()
    x, sd = v_scale(units, 0.0)
    support = build_support(x, 0.2, 0.15, 300)
    for c in (0.01, 1.0, 1e6):
        G = fit_logspline(units, 0.0, support, c)
        _, g, _ = _baseline_evaluator(_log_lik_matrix(x, sd, support), G.basis)(G.alpha, True)
        na = np.linalg.norm(G.alpha)
        if na > 0:
            assert np.allclose(g, c * G.alpha / na, atol=1e-5)
        else:
            assert np.linalg.norm(g) <= c + 1e-8
            assert np.allclose(G.masses, 1 / len(support))  # a dominant penalty gives the uniform grid


def test_mixing_json_round_trip():
    units = _sim_units(n=80)
    x, _ = v_scale(units, 0.0)
    G = fit_logspline(units, 0.0, build_support(x, 0.2, 0.15, 100), 0.1)
    back = SplineMixing.from_json(G.to_json())
    assert np.allclose(back.masses, G.masses, atol=1e-14)
    assert np.array_equal(back.support, G.support) and back.penalty == G.penalty


def test_mixing_moments_of_point_mass_and_product():
    m, sd, _, _ = mixing_moments(point_mass(2.0))
    assert (m, sd) == (2.0, 0.0)
    G = SplineMixing(np.array([0.0, 1.0]), np.zeros((2, 0)), np.zeros(0), np.array([0.5, 0.5]))
    m, sd, skew, kurt = mixing_moments(G, factor=point_mass(3.0))
    assert m == pytest.approx(1.5) and sd == pytest.approx(1.5) and skew == pytest.approx(0.0, abs=1e-12)
    assert kurt == pytest.approx(-2.0)


def test_calibration_stays_in_bounds_and_tie_tolerance_prefers_more_smoothing():
    units = _sim_units(n=200)
    params = fit_gmm(units, fixed_beta=0.0, restarts=4)
    x, _ = v_scale(units, 0.0)
    support = build_support(x, params.mu_v, params.sigma_v, 200)
    base = calibrate_penalty(units, params, support)
    assert 1e-4 * 0.999 <= base.penalty <= 1e4 * 1.001 and math.isfinite(base.criterion)
    loose = calibrate_penalty(units, params, support, tie_tolerance=1.0)
    assert loose.penalty >= base.penalty * 0.999
    assert loose.criterion <= base.criterion + 1.0 + 1e-9


def test_hierarchical_fit_normalises_group_mean():
    units = _sim_units(n=150, grouped=True)
    x, _ = v_scale(units, 0.0)
    eta = np.linspace(0.0, 3.0, 40)
    xi = build_support(x, 0.2, 0.15, 40)
    G_eta, G_xi = fit_hierarchical(units, 0.0, eta, xi, (0.1, 0.1))
    assert G_eta.mean() == pytest.approx(1.0, abs=1e-10)
    assert G_xi.masses.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_hierarchical(_sim_units(n=20), 0.0, eta, xi, (0.1, 0.1))
