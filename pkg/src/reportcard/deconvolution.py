"""Penalised log-spline deconvolution on a discrete grid (Efron-style).

Masses are ``softmax(Q @ alpha)`` where ``Q`` is a natural cubic spline basis
evaluated on the grid. The baseline model has one mixing distribution for
``v = theta / s**beta``; the hierarchical model factors ``v = eta * xi`` with a
between-group distribution for ``eta`` (mean one) and a within-group one for ``xi``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .ingest import UnitRecord
from .precision import PrecisionModelParams

logger = logging.getLogger(__name__)

LOG_C_BOUNDS = (math.log(1e-4), math.log(1e4))


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (gradient norm {grad_norm:.3g})")
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class SplineMixing:
    support: np.ndarray
    basis: np.ndarray
    alpha: np.ndarray
    masses: np.ndarray
    penalty: float = 0.0
    spline_order: int = 5
    loglik: float = float("nan")
    grad_norm: float = 0.0

    def __post_init__(self):
        if self.masses.shape != self.support.shape:
            raise ValueError("masses and support differ in length")
        if np.any(self.masses < 0) or abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be a probability vector")

    @property
    def size(self) -> int:
        return len(self.support)

    def mean(self) -> float:
        return float(self.masses @ self.support)

    def rescaled(self, factor: float) -> "SplineMixing":
        """Same masses on the grid ``support * factor``."""
        return SplineMixing(
            self.support * factor, self.basis, self.alpha, self.masses, self.penalty,
            self.spline_order, self.loglik, self.grad_norm,
        )

    def to_dict(self) -> dict:
        return {
            "support": self.support.tolist(),
            "alpha": self.alpha.tolist(),
            "masses": self.masses.tolist(),
            "penalty": self.penalty,
            "basis": {"kind": "natural_cubic_orthonormal", "order": self.spline_order, "knots": "equally_spaced"},
            "loglik": self.loglik,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SplineMixing":
        support = np.asarray(d["support"], dtype=float)
        order = int(d.get("basis", {}).get("order", 5))
        alpha = np.asarray(d["alpha"], dtype=float)
        basis = spline_basis(len(support), order)
        # masses are recomputed from alpha so the softmax structure is exact
        masses = softmax_masses(basis, alpha) if alpha.size else np.asarray(d["masses"], dtype=float)
        return cls(support, basis, alpha, masses, float(d.get("penalty", 0.0)), order, float(d.get("loglik", "nan")))

    @classmethod
    def from_json(cls, text: str) -> "SplineMixing":
        return cls.from_dict(json.loads(text))


def point_mass(at: float = 1.0) -> SplineMixing:
    return SplineMixing(np.array([float(at)]), np.zeros((1, 0)), np.zeros(0), np.ones(1))


def softmax_masses(basis: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    z = basis @ alpha
    g = np.exp(z - logsumexp(z))
    return g / g.sum()


def spline_basis(m: int, order: int = 5) -> np.ndarray:
    """Orthonormal natural cubic spline basis with ``order`` columns on ``m`` grid points.

    Knots (two boundary, ``order - 1`` interior) are equally spaced over the grid.
    Columns are centred, since masses are invariant to constant shifts, then
    orthonormalised so the penalty ``c * |alpha|`` does not depend on basis scaling.
    """
    if m == 1:
        return np.zeros((1, 0))
    x = np.linspace(0.0, 1.0, m)
    knots = np.linspace(0.0, 1.0, order + 1)
    K = len(knots)

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - knots[-1], 0.0) ** 3) / (knots[-1] - knots[k])

    cols = [x] + [d(k) - d(K - 2) for k in range(K - 2)]
    N = np.column_stack(cols)
    N = N - N.mean(axis=0)
    u, sv, _ = np.linalg.svd(N, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-10))
    return u[:, :rank]


def build_support(
    estimates: Sequence[float],
    mean: float,
    sd: float,
    m: int,
    lower: float = 0.0,
    n_sd: float = 5.0,
) -> np.ndarray:
    """Equally spaced grid on ``[lower, max(max(estimates), mean + n_sd * sd)]``."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("estimates must be nonempty")
    upper = max(float(est.max()), mean + n_sd * sd)
    if not upper > lower:
        raise ValueError(f"degenerate support: upper {upper} <= lower {lower}")
    if m < 2:
        raise ValueError("support needs at least two points")
    return np.linspace(lower, upper, m)


def v_scale(units: Sequence[UnitRecord], beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Estimates and noise sds on the ``v`` scale: ``theta_hat / s**beta`` and ``s**(1-beta)``."""
    theta = np.array([u.estimate for u in units], dtype=float)
    s = np.array([u.se for u in units], dtype=float)
    return theta / s**beta, s ** (1.0 - beta)


def _log_lik_matrix(x: np.ndarray, sd: np.ndarray, support: np.ndarray) -> np.ndarray:
    z = (x[:, None] - support[None, :]) / sd[:, None]
    return -0.5 * z**2 - np.log(sd)[:, None] - 0.5 * math.log(2 * math.pi)


# ----------------------------------------------------------------------------
# Penalised Newton ascent over blocks of coefficients
# ----------------------------------------------------------------------------

def _penalised_ascent(
    evaluate: Callable[[np.ndarray, bool], tuple],
    blocks: list[slice],
    penalties: list[float],
    x0: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 500,
) -> tuple[np.ndarray, float, float]:
    """Maximise ``f(x) - sum_b c_b |x_b|`` with a damped Newton method.

    ``evaluate(x, hess)`` returns ``(f, grad)`` or ``(f, grad, hessian)``. A block
    at zero stays there while its gradient norm is within its penalty, which is
    the subgradient optimality condition for the norm penalty.
    """
    x = x0.astype(float).copy()

    def pen_value(x):
        return sum(c * np.linalg.norm(x[b]) for b, c in zip(blocks, penalties))

    def total_grad(x, g):
        out = g.copy()
        for b, c in zip(blocks, penalties):
            nb = np.linalg.norm(x[b])
            if nb > 0:
                out[b] -= c * x[b] / nb
            else:
                # minimum-norm subgradient at zero
                gb = g[b]
                ng = np.linalg.norm(gb)
                out[b] = 0.0 if ng <= c else gb * (1 - c / ng)
        return out

    f, g, H = evaluate(x, True)
    obj = f - pen_value(x)
    gnorm = np.inf
    for _ in range(max_iter):
        # a block hovering just off zero with a small gradient belongs at zero
        for b, c in zip(blocks, penalties):
            nb = np.linalg.norm(x[b])
            if 0 < nb < 1e-5 and np.linalg.norm(g[b]) <= c:
                x_try = x.copy()
                x_try[b] = 0.0
                f_t, g_t, H_t = evaluate(x_try, True)
                obj_t = f_t - pen_value(x_try)
                if obj_t >= obj - 1e-12 * max(1.0, abs(obj)):
                    x, f, g, H, obj = x_try, f_t, g_t, H_t, obj_t
        tg = total_grad(x, g)
        gnorm = float(np.linalg.norm(tg))
        if gnorm < tol:
            break
        free = np.ones(len(x), dtype=bool)
        for b, c in zip(blocks, penalties):
            if np.linalg.norm(x[b]) == 0 and np.linalg.norm(tg[b]) == 0:
                free[b] = False
        Ht = H.copy()
        for b, c in zip(blocks, penalties):
            xb = x[b]
            nb = np.linalg.norm(xb)
            if nb > 0:
                Ht[b, b] -= c * (np.eye(len(xb)) / nb - np.outer(xb, xb) / nb**3)
        idx = np.flatnonzero(free)
        A = -Ht[np.ix_(idx, idx)]
        direction = np.zeros_like(x)
        tau = 0.0
        for _attempt in range(60):
            try:
                L = np.linalg.cholesky(A + tau * np.eye(len(idx)))
                direction[idx] = np.linalg.solve(L.T, np.linalg.solve(L, tg[idx]))
                break
            except np.linalg.LinAlgError:
                tau = max(2 * tau, 1e-8 * max(1.0, np.abs(A).max()))
        else:
            direction[idx] = tg[idx]
        if direction @ tg <= 0:
            direction = tg.copy()
        # a block leaving zero must move along its gradient (the penalty kink)
        for b, c in zip(blocks, penalties):
            if np.linalg.norm(x[b]) == 0 and free[b].any():
                direction[b] = tg[b]
        step = 1.0
        accepted = False
        for _ls in range(60):
            x_new = x + step * direction
            f_new, g_new, H_new = evaluate(x_new, True)
            obj_new = f_new - pen_value(x_new)
            if np.isfinite(obj_new) and obj_new >= obj + 1e-4 * step * (direction @ tg) - 1e-13 * abs(obj):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            prox = _prox_gradient_step(evaluate, blocks, penalties, x, g, obj, pen_value)
            if prox is None:
                break
            x_new, f_new, g_new, H_new, obj_new = prox
        # blocks that cross the kink are snapped back to zero when that is optimal
        for b, c in zip(blocks, penalties):
            if 0 < np.linalg.norm(x_new[b]) < 1e-10:
                x_try = x_new.copy()
                x_try[b] = 0.0
                f_t, g_t, H_t = evaluate(x_try, True)
                if f_t - pen_value(x_try) >= obj_new:
                    x_new, f_new, g_new, H_new = x_try, f_t, g_t, H_t
                    obj_new = f_t - pen_value(x_try)
        x, f, g, H, obj = x_new, f_new, g_new, H_new, obj_new
    tg = total_grad(x, g)
    gnorm = float(np.linalg.norm(tg))
    if not gnorm < 1e-6:
        raise ConvergenceError("penalised log-spline fit did not converge", gnorm)
    return x, f, gnorm


def _prox_gradient_step(evaluate, blocks, penalties, x, g, obj, pen_value):
    """One backtracking proximal-gradient step; ``None`` when no ascent is found."""
    step = 1.0
    for _ in range(60):
        x_new = x + step * g
        for b, c in zip(blocks, penalties):
            nb = np.linalg.norm(x_new[b])
            shrink = max(0.0, 1.0 - step * c / nb) if nb > 0 else 0.0
            x_new[b] = x_new[b] * shrink
        f_new, g_new, H_new = evaluate(x_new, True)
        obj_new = f_new - pen_value(x_new)
        diff = x_new - x
        if np.isfinite(obj_new) and obj_new > obj - 1e-14 * abs(obj) and obj_new >= obj + g @ diff - (diff @ diff) / (2 * step):
            if np.allclose(x_new, x, rtol=0, atol=1e-15):
                return None
            return x_new, f_new, g_new, H_new, obj_new
        step *= 0.5
    return None


# ----------------------------------------------------------------------------
# Baseline fit
# ----------------------------------------------------------------------------

def _baseline_evaluator(logL: np.ndarray, Q: np.ndarray):
    n = logL.shape[0]

    def evaluate(alpha, hess=True):
        z = Q @ alpha
        logg = z - logsumexp(z)
        a = logL + logg[None, :]
        lse = logsumexp(a, axis=1)
        f = float(lse.sum())
        w = np.exp(a - lse[:, None])
        g_mass = np.exp(logg)
        wbar = w.sum(axis=0)
        grad = Q.T @ (wbar - n * g_mass)
        if not hess:
            return f, grad
        WQ = w @ Q
        H = Q.T @ (wbar[:, None] * Q) - WQ.T @ WQ
        gQ = g_mass @ Q
        H -= n * (Q.T @ (g_mass[:, None] * Q) - np.outer(gQ, gQ))
        return f, grad, H

    return evaluate


def fit_logspline(
    units: Sequence[UnitRecord],
    beta: float,
    support: np.ndarray,
    penalty: float,
    spline_order: int = 5,
    alpha0: np.ndarray | None = None,
) -> SplineMixing:
    """Penalised maximum likelihood for the mixing distribution of ``v``."""
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    x, sd = v_scale(units, beta)
    Q = spline_basis(len(support), spline_order)
    logL = _log_lik_matrix(x, sd, support)
    evaluate = _baseline_evaluator(logL, Q)
    start = np.zeros(Q.shape[1]) if alpha0 is None else np.asarray(alpha0, dtype=float)
    alpha, f, gnorm = _penalised_ascent(evaluate, [slice(0, Q.shape[1])], [penalty], start)
    return SplineMixing(support, Q, alpha, softmax_masses(Q, alpha), penalty, spline_order, f, gnorm)


# ----------------------------------------------------------------------------
# Hierarchical fit
# ----------------------------------------------------------------------------

def _group_index(units: Sequence[UnitRecord], groups=None) -> np.ndarray:
    labels = groups if groups is not None else [u.group for u in units]
    if any(g is None for g in labels):
        raise ValueError("hierarchical fit requires a group label for every unit")
    _, idx = np.unique(np.asarray(labels, dtype=str), return_inverse=True)
    return idx


def _hier_evaluator(logphi: np.ndarray, gidx: np.ndarray, Qe: np.ndarray, Qx: np.ndarray):
    """Log-likelihood, gradient and Hessian for ``(alpha_eta, alpha_xi)``.

    ``logphi[i, l, m]`` is the log density of unit ``i`` at ``v = eta_l * xi_m``.
    """
    n, Me, Mx = logphi.shape
    K = int(gidx.max()) + 1
    Be, Bx = Qe.shape[1], Qx.shape[1]

    # densities are kept in linear space, scaled per unit to avoid underflow
    off = logphi.max(axis=(1, 2))
    phi = np.exp(logphi - off[:, None, None])

    def evaluate(theta, hess=True):
        ae, ax = theta[:Be], theta[Be:]
        ze = Qe @ ae
        loge = ze - logsumexp(ze)
        zx = Qx @ ax
        logx = zx - logsumexp(zx)
        ge, gx = np.exp(loge), np.exp(logx)
        A = phi @ gx  # (n, Me)
        with np.errstate(divide="ignore"):
            logA = np.log(A) + off[:, None]
        S = np.zeros((K, Me))
        np.add.at(S, gidx, logA)
        b = S + loge[None, :]
        logLk = logsumexp(b, axis=1)
        f = float(logLk.sum())
        if not np.isfinite(f):
            return (-np.inf, np.zeros(Be + Bx)) if not hess else (-np.inf, np.zeros(Be + Bx), np.zeros((Be + Bx,) * 2))
        P = np.exp(b - logLk[:, None])  # eta posteriors per group
        Pi = P[gidx]  # (n, Me)
        PA = np.where(A > 0, Pi / np.where(A > 0, A, 1.0), 0.0)
        A_safe = np.where(A > 0, A, 1.0)
        grad_e = Qe.T @ (P.sum(axis=0) - K * ge)
        wq = (phi @ (gx[:, None] * Qx)) / A_safe[:, :, None]  # (n, Me, Bx)
        a_il = wq - (gx @ Qx)[None, None, :]
        grad_x = np.einsum("il,ilb->b", Pi, a_il)
        grad = np.concatenate([grad_e, grad_x])
        if not hess:
            return f, grad
        H = np.zeros((Be + Bx, Be + Bx))
        if Be:
            PQ = P @ Qe
            H[:Be, :Be] = Qe.T @ (P.sum(0)[:, None] * Qe) - PQ.T @ PQ
            geQ = ge @ Qe
            H[:Be, :Be] -= K * (Qe.T @ (ge[:, None] * Qe) - np.outer(geQ, geQ))
        akl = np.zeros((K, Me, Bx))
        np.add.at(akl, gidx, a_il)
        abar = np.einsum("kl,klb->kb", P, akl)
        dev = akl - abar[:, None, :]
        Hxx = np.einsum("kl,klb,klc->bc", P, dev, akl)
        wsum = gx * np.einsum("il,ilm->m", PA, phi)
        Hxx += Qx.T @ (wsum[:, None] * Qx) - np.einsum("il,ilb,ilc->bc", Pi, wq, wq)
        gxQ = gx @ Qx
        Hxx -= n * (Qx.T @ (gx[:, None] * Qx) - np.outer(gxQ, gxQ))
        H[Be:, Be:] = Hxx
        if Be:
            Hex = np.einsum("lb,kl,klc->bc", Qe, P, dev)
            H[:Be, Be:] = Hex
            H[Be:, :Be] = Hex.T
        return f, grad, H

    return evaluate


@dataclass
class _HierCache:
    logphi: np.ndarray
    gidx: np.ndarray
    Qe: np.ndarray
    Qx: np.ndarray


def _hier_cache(units, gidx, beta, eta_support, xi_support, spline_order) -> _HierCache:
    x, sd = v_scale(units, beta)
    prod = np.outer(eta_support, xi_support)
    z = (x[:, None, None] - prod[None, :, :]) / sd[:, None, None]
    logphi = -0.5 * z**2 - np.log(sd)[:, None, None] - 0.5 * math.log(2 * math.pi)
    return _HierCache(
        logphi, gidx, spline_basis(len(eta_support), spline_order), spline_basis(len(xi_support), spline_order)
    )


def _fit_hier_cached(cache: _HierCache, eta_support, xi_support, penalties, spline_order, theta0=None):
    Be, Bx = cache.Qe.shape[1], cache.Qx.shape[1]
    evaluate = _hier_evaluator(cache.logphi, cache.gidx, cache.Qe, cache.Qx)
    start = np.zeros(Be + Bx) if theta0 is None else np.asarray(theta0, dtype=float)
    blocks, pens = [], []
    if Be:
        blocks.append(slice(0, Be))
        pens.append(penalties[0])
    blocks.append(slice(Be, Be + Bx))
    pens.append(penalties[1])
    theta, f, gnorm = _penalised_ascent(evaluate, blocks, pens, start)
    ae, ax = theta[:Be], theta[Be:]
    ge = softmax_masses(cache.Qe, ae) if Be else np.ones(1)
    G_eta = SplineMixing(np.asarray(eta_support, float), cache.Qe, ae, ge, penalties[0], spline_order, f, gnorm)
    G_xi = SplineMixing(
        np.asarray(xi_support, float), cache.Qx, ax, softmax_masses(cache.Qx, ax), penalties[1], spline_order, f, gnorm
    )
    # scale normalisation: E[eta] = 1; the likelihood only depends on eta * xi
    kappa = G_eta.mean()
    return G_eta.rescaled(1.0 / kappa), G_xi.rescaled(kappa), theta


def fit_hierarchical(
    units: Sequence[UnitRecord],
    beta: float,
    eta_support: np.ndarray,
    xi_support: np.ndarray,
    penalties: tuple[float, float],
    groups: Sequence[str] | None = None,
    spline_order: int = 5,
) -> tuple[SplineMixing, SplineMixing]:
    """Joint penalised likelihood over group effects ``eta`` and unit effects ``xi``.

    After fitting, both grids are rescaled so the ``eta`` distribution has mean one.
    """
    gidx = _group_index(units, groups)
    if min(penalties) < 0:
        raise ValueError("penalties must be nonnegative")
    cache = _hier_cache(units, gidx, beta, np.asarray(eta_support, float), np.asarray(xi_support, float), spline_order)
    G_eta, G_xi, _ = _fit_hier_cached(cache, eta_support, xi_support, penalties, spline_order)
    return G_eta, G_xi


# ----------------------------------------------------------------------------
# Moments
# ----------------------------------------------------------------------------

def raw_moments(G: SplineMixing, order: int = 4) -> np.ndarray:
    return np.array([G.masses @ G.support**r for r in range(order + 1)])


def _shape(raw: np.ndarray) -> tuple[float, float, float, float]:
    m1 = raw[1]
    var = max(raw[2] - m1**2, 0.0)
    sd = math.sqrt(var)
    if sd <= 1e-300:
        return float(m1), 0.0, 0.0, 0.0
    c3 = raw[3] - 3 * m1 * raw[2] + 2 * m1**3
    c4 = raw[4] - 4 * m1 * raw[3] + 6 * m1**2 * raw[2] - 3 * m1**4
    return float(m1), sd, float(c3 / sd**3), float(c4 / sd**4 - 3.0)


def mixing_moments(
    G: SplineMixing,
    scales: np.ndarray | None = None,
    factor: SplineMixing | None = None,
) -> tuple[float, float, float, float]:
    """Mean, sd, skewness and excess kurtosis of a grid distribution.

    ``factor`` multiplies by an independent second distribution (``eta * xi``);
    ``scales`` mixes the result over units' ``s_i**beta`` with equal weights,
    which gives the marginal moments of ``theta``.
    """
    raw = raw_moments(G)
    if factor is not None:
        raw = raw * raw_moments(factor)
    if scales is not None:
        sc = np.asarray(scales, dtype=float)
        raw = raw * np.array([np.mean(sc**r) for r in range(5)])
    return _shape(raw)


# ----------------------------------------------------------------------------
# Penalty calibration
# ----------------------------------------------------------------------------

def _golden(fn, lo, hi, tol=0.02, max_iter=80):
    """Golden-section minimiser returning ``(x, f(x))``; ties go to the larger x."""
    r = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = fn(d)
    return (c, fc) if fc < fd else (d, fd)


def _grid_then_golden(fn, lo, hi, n_grid=17, tie_tolerance=0.0):
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([fn(x) for x in grid])
    if tie_tolerance > 0 and np.isfinite(vals.min()):
        return _largest_within(fn, grid, vals, vals.min() + tie_tolerance)
    # prefer the largest penalty among (near-)ties
    best = int(np.flatnonzero(vals <= vals.min() + 1e-12 * max(1.0, abs(vals.min())))[-1])
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, n_grid - 1)]
    x, f = _golden(fn, a, b)
    if vals[best] <= f:
        x, f = grid[best], vals[best]
    if best in (0, n_grid - 1):
        logger.warning("penalty calibration hit the search boundary at c=%.3g", math.exp(x))
    return x, f


def _largest_within(fn, grid, vals, level, tol=0.02):
    """Largest ``x`` whose criterion stays within ``level``, refined by bisection."""
    k = int(np.flatnonzero(vals <= level)[-1])
    if k == len(grid) - 1:
        logger.warning("penalty calibration hit the search boundary at c=%.3g", math.exp(grid[k]))
        return grid[k], vals[k]
    a, b, fa = grid[k], grid[k + 1], vals[k]
    while b - a > tol:
        mid = 0.5 * (a + b)
        fm = fn(mid)
        if fm <= level:
            a, fa = mid, fm
        else:
            b = mid
    return a, fa


@dataclass
class BaselinePrior:
    G: SplineMixing
    penalty: float
    criterion: float


def default_baseline_support(units, params: PrecisionModelParams, m: int = 1000) -> np.ndarray:
    x, _ = v_scale(units, params.beta)
    return build_support(x, params.mu_v, params.sigma_v, m)


def calibrate_penalty(
    units: Sequence[UnitRecord],
    params: PrecisionModelParams,
    support: np.ndarray | None = None,
    spline_order: int = 5,
    bounds: tuple[float, float] = LOG_C_BOUNDS,
    targets: tuple[float, float] | None = None,
    target_vcov: np.ndarray | None = None,
    tie_tolerance: float = 0.0,
) -> BaselinePrior:
    """Pick ``c`` so the fitted (mean, sd) of ``v`` is closest to the GMM values.

    Distance is the quadratic form in the inverse GMM covariance of ``(mu_v, sigma_v)``.
    A positive ``tie_tolerance`` treats every ``c`` whose distance is within that
    amount of the minimum as tied and returns the largest such ``c``.
    """
    if support is None:
        support = default_baseline_support(units, params)
    tgt = np.array(targets if targets is not None else (params.mu_v, params.sigma_v), dtype=float)
    V = target_vcov if target_vcov is not None else _baseline_target_vcov(params)
    Winv = np.linalg.pinv(V)
    cache: dict[float, SplineMixing] = {}
    warm = [None]

    def fit(logc):
        if logc not in cache:
            G = fit_logspline(units, params.beta, support, math.exp(logc), spline_order, alpha0=warm[0])
            cache[logc] = G
            warm[0] = G.alpha if np.linalg.norm(G.alpha) > 0 else None
        return cache[logc]

    def crit(logc):
        try:
            G = fit(logc)
        except ConvergenceError as err:
            logger.warning("fit at c=%.3g did not converge (%s); skipping it", math.exp(logc), err)
            return math.inf
        m, sd, _, _ = mixing_moments(G)
        diff = np.array([m, sd]) - tgt
        return float(diff @ Winv @ diff)

    logc, f = _grid_then_golden(crit, *bounds, tie_tolerance=tie_tolerance)
    return BaselinePrior(fit(logc), math.exp(logc), f)


def _baseline_target_vcov(params: PrecisionModelParams) -> np.ndarray:
    if params.hierarchical:
        # delta method for sigma_v as a function of (mu_v, sigma_eta, sigma_xi)
        mu, se, sx, sv = params.mu_v, params.sigma_eta, params.sigma_xi, params.sigma_v
        J = np.array([[1.0, 0, 0], [se**2 * mu / sv, (se * sx**2 + se * mu**2) / sv, (se**2 * sx + sx) / sv]])
        return J @ params.sub_vcov(["mu_v", "sigma_eta", "sigma_xi"]) @ J.T
    return params.sub_vcov(["mu_v", "sigma_v"])


@dataclass
class HierarchicalPrior:
    G_eta: SplineMixing
    G_xi: SplineMixing
    penalties: tuple[float, float]
    criterion: float


def default_hierarchical_supports(units, params: PrecisionModelParams, m_eta: int = 200, m_xi: int = 200, groups=None):
    """Grids for ``eta`` (scale one) and ``xi`` (scale of ``v``)."""
    x, _ = v_scale(units, params.beta)
    gidx = _group_index(units, groups)
    vbar = np.bincount(gidx, x) / np.bincount(gidx)
    eta_hat = vbar / params.mu_v
    eta_support = build_support(eta_hat, 1.0, params.sigma_eta, m_eta)
    xi_support = build_support(x, params.mu_v, params.sigma_xi, m_xi)
    return eta_support, xi_support


def calibrate_hierarchical(
    units: Sequence[UnitRecord],
    params: PrecisionModelParams,
    eta_support: np.ndarray | None = None,
    xi_support: np.ndarray | None = None,
    groups: Sequence[str] | None = None,
    spline_order: int = 5,
    sweeps: int = 3,
    bounds: tuple[float, float] = LOG_C_BOUNDS,
) -> HierarchicalPrior:
    """Coordinate search over ``(log c_eta, log c_xi)`` matching ``(mu_v, sigma_eta, sigma_xi)``."""
    if not params.hierarchical:
        raise ValueError("hierarchical calibration needs hierarchical GMM parameters")
    if eta_support is None or xi_support is None:
        eta_support, xi_support = default_hierarchical_supports(units, params, groups=groups)
    gidx = _group_index(units, groups)
    cache_h = _hier_cache(units, gidx, params.beta, eta_support, xi_support, spline_order)
    tgt = np.array([params.mu_v, params.sigma_eta, params.sigma_xi])
    Winv = np.linalg.pinv(params.sub_vcov(["mu_v", "sigma_eta", "sigma_xi"]))
    fits: dict[tuple[float, float], tuple] = {}
    warm = [None]

    def fit(key):
        if key not in fits:
            Ge, Gx, theta = _fit_hier_cached(
                cache_h, eta_support, xi_support, (math.exp(key[0]), math.exp(key[1])), spline_order, warm[0]
            )
            fits[key] = (Ge, Gx)
            warm[0] = theta if np.all([np.linalg.norm(theta) > 0]) else None
        return fits[key]

    def crit(key):
        try:
            Ge, Gx = fit(key)
        except ConvergenceError as err:
            logger.warning("fit at log c=%s did not converge (%s); skipping it", key, err)
            return math.inf
        m_x, sd_x, _, _ = mixing_moments(Gx)
        _, sd_e, _, _ = mixing_moments(Ge)
        diff = np.array([m_x, sd_e, sd_x]) - tgt
        return float(diff @ Winv @ diff)

    point = [0.0, 0.0]
    best = crit(tuple(point))
    for sweep in range(sweeps):
        prev = best
        for j in range(2):

            def along(v, j=j):
                p = list(point)
                p[j] = v
                return crit(tuple(p))

            if sweep == 0:
                v, f = _grid_then_golden(along, *bounds, n_grid=9)
            else:
                # later sweeps refine locally around the current point
                lo = max(bounds[0], point[j] - 1.5)
                hi = min(bounds[1], point[j] + 1.5)
                v, f = _golden(along, lo, hi, tol=0.02)
            if f <= best:
                point[j], best = v, f
        if prev - best < 1e-8:
            break
    Ge, Gx = fit(tuple(point))
    return HierarchicalPrior(Ge, Gx, (math.exp(point[0]), math.exp(point[1])), best)
